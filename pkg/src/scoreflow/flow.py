"""Conditional affine-coupling normalizing flow with exact log-det-Jacobian.

The flow maps a target vector x to a latent z conditioned on a summary
vector, through a stack of coupling blocks. Each block leaves a masked half
of the coordinates untouched and applies an elementwise scale-and-shift to
the rest, with scale and shift predicted by a small MLP from the untouched
half plus the conditioner. The Jacobian is triangular, so the log-det is
the sum of the coupling log-scales.

Training is maximum likelihood on (x, cond) pairs: the loss is the batch
mean of 0.5*||z||^2 - log_det. Note this drops the (d/2)*log(2*pi) base
density constant, which does not move the minimizer; `log_prob` includes
it, so exp(log_prob) is a normalized density.

Gradients are computed by hand-written reverse-mode passes; there is no
autodiff framework underneath, which keeps checkpoints and training
bitwise reproducible.
"""

from __future__ import annotations

import struct

import numpy as np

from .numerics import LOG_2PI, Rng, ShapeError

CHECKPOINT_MAGIC = b"SFLOWCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or mismatched checkpoint payloads."""


class ConditioningNet:
    """MLP with tanh hidden layers predicting raw (log-scale, shift) heads.

    The output layer is zero-initialized so a fresh flow starts as the
    identity coupling (unit scale, zero shift).
    """

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, rng: Rng | None):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        widths = [in_dim, *hidden, out_dim]
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            last = i == len(widths) - 2
            if last or rng is None:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def forward(self, h: np.ndarray):
        """Returns the output and a cache of layer inputs for backward."""
        cache = []
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            cache.append(h)
            h = h @ W + b
            if i < n_layers - 1:
                h = np.tanh(h)
                cache.append(h)  # post-activation, reused as 1 - h^2 in backward
        return h, cache

    def backward(self, dout: np.ndarray, cache):
        """Backprop `dout` through the net; returns (dinput, grads).

        `grads` is aligned with `parameters()`.
        """
        n_layers = len(self.weights)
        dW = [None] * n_layers
        db = [None] * n_layers
        dh = dout
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                act = cache[2 * i + 1]
                dh = dh * (1.0 - act * act)
            h_in = cache[2 * i]
            dW[i] = h_in.T @ dh
            db[i] = dh.sum(axis=0)
            dh = dh @ self.weights[i].T
        grads = []
        for i in range(n_layers):
            grads.append(dW[i])
            grads.append(db[i])
        return dh, grads


def alternating_masks(x_dim: int, n_blocks: int) -> list[np.ndarray]:
    """Half-masks that alternate so every coordinate gets transformed.

    For x_dim == 1 the masked half is empty and the single coordinate is
    transformed in every block, driven by the conditioner alone.
    """
    masks = []
    half = x_dim // 2
    for k in range(n_blocks):
        m = np.zeros(x_dim, dtype=bool)
        if x_dim > 1:
            if k % 2 == 0:
                m[:half] = True
            else:
                m[half:] = True
        masks.append(m)
    return masks


class CouplingFlow:
    """Stack of conditional affine coupling blocks with input normalization.

    Normalization constants (per-dimension affine standardization of both
    the target and the conditioner) are part of the model and stored in
    checkpoints; the x-side normalization contributes -sum(log(scale)) to
    the log-det.
    """

    def __init__(self, x_dim, cond_dim, masks, nets, s_max=2.0):
        self.x_dim = int(x_dim)
        self.cond_dim = int(cond_dim)
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        self.nets = list(nets)
        self.s_max = float(s_max)
        self.x_mean = np.zeros(self.x_dim)
        self.x_scale = np.ones(self.x_dim)
        self.cond_mean = np.zeros(self.cond_dim)
        self.cond_scale = np.ones(self.cond_dim)

    @classmethod
    def create(cls, x_dim, cond_dim, rng: Rng, n_blocks=6, hidden=(128, 128), s_max=2.0):
        masks = alternating_masks(x_dim, n_blocks)
        nets = []
        for k, m in enumerate(masks):
            n_masked = int(m.sum())
            n_free = x_dim - n_masked
            net_rng = rng.child(k) if rng is not None else None
            nets.append(ConditioningNet(n_masked + cond_dim, hidden, 2 * n_free, net_rng))
        return cls(x_dim, cond_dim, masks, nets, s_max=s_max)

    def set_normalization(self, x_mean, x_scale, cond_mean, cond_scale):
        for name, v, d in (
            ("x_mean", x_mean, self.x_dim),
            ("x_scale", x_scale, self.x_dim),
            ("cond_mean", cond_mean, self.cond_dim),
            ("cond_scale", cond_scale, self.cond_dim),
        ):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (d,):
                raise ShapeError(f"{name} must have shape ({d},), got {v.shape}")
        self.x_mean = np.asarray(x_mean, dtype=np.float64).copy()
        self.x_scale = np.asarray(x_scale, dtype=np.float64).copy()
        self.cond_mean = np.asarray(cond_mean, dtype=np.float64).copy()
        self.cond_scale = np.asarray(cond_scale, dtype=np.float64).copy()
        if np.any(self.x_scale <= 0.0) or np.any(self.cond_scale <= 0.0):
            raise ValueError("normalization scales must be positive")

    def fit_normalization(self, x: np.ndarray, cond: np.ndarray, floor: float = 1e-8):
        """Estimate standardization constants from a training set."""
        self.set_normalization(
            x.mean(axis=0),
            np.maximum(x.std(axis=0), floor),
            cond.mean(axis=0),
            np.maximum(cond.std(axis=0), floor),
        )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for net in self.nets:
            out.extend(net.parameters())
        return out

    def _check_batch(self, x, cond):
        x = np.asarray(x, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.x_dim:
            raise ShapeError(f"x must be (batch, {self.x_dim}), got {x.shape}")
        if cond.ndim != 2 or cond.shape[1] != self.cond_dim:
            raise ShapeError(f"cond must be (batch, {self.cond_dim}), got {cond.shape}")
        if x.shape[0] != cond.shape[0]:
            raise ShapeError(f"batch sizes disagree: {x.shape[0]} vs {cond.shape[0]}")
        return x, cond

    def _squash(self, u):
        return self.s_max * np.tanh(u / self.s_max)

    def _forward_impl(self, x, cond, want_cache: bool):
        x, cond = self._check_batch(x, cond)
        xn = (x - self.x_mean) / self.x_scale
        cn = (cond - self.cond_mean) / self.cond_scale
        log_det = np.full(x.shape[0], -np.sum(np.log(self.x_scale)))
        caches = []
        for m, net in zip(self.masks, self.nets):
            a = xn[:, m]
            b = xn[:, ~m]
            raw, net_cache = net.forward(np.concatenate([a, cn], axis=1))
            n_free = b.shape[1]
            s = self._squash(raw[:, :n_free])
            t = raw[:, n_free:]
            es = np.exp(s)
            b2 = b * es + t
            out = np.empty_like(xn)
            out[:, m] = a
            out[:, ~m] = b2
            log_det = log_det + s.sum(axis=1)
            if want_cache:
                caches.append((b, s, es, net_cache))
            xn = out
        if not np.all(np.isfinite(xn)):
            raise FloatingPointError("non-finite activations in flow forward")
        if want_cache:
            return xn, log_det, caches
        return xn, log_det

    def forward(self, x, cond):
        """Map x to latent z; returns (z, log_det) with log_det per sample."""
        return self._forward_impl(x, cond, want_cache=False)

    def inverse(self, z, cond):
        """Map latent z back to x; returns (x, log_det) with the forward's
        log_det negated at the corresponding point."""
        z, cond = self._check_batch(z, cond)
        cn = (cond - self.cond_mean) / self.cond_scale
        xn = z.copy()
        log_det = np.full(z.shape[0], np.sum(np.log(self.x_scale)))
        for m, net in zip(reversed(self.masks), reversed(self.nets)):
            a = xn[:, m]
            b2 = xn[:, ~m]
            raw, _ = net.forward(np.concatenate([a, cn], axis=1))
            n_free = b2.shape[1]
            s = self._squash(raw[:, :n_free])
            t = raw[:, n_free:]
            b = (b2 - t) * np.exp(-s)
            out = np.empty_like(xn)
            out[:, m] = a
            out[:, ~m] = b
            log_det = log_det - s.sum(axis=1)
            xn = out
        x = xn * self.x_scale + self.x_mean
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite activations in flow inverse")
        return x, log_det

    def nll_loss(self, x, cond) -> float:
        """Batch mean of 0.5*||z||^2 - log_det (base-density constant dropped)."""
        z, log_det = self.forward(x, cond)
        loss = float(np.mean(0.5 * np.sum(z * z, axis=1) - log_det))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite flow training loss")
        return loss

    def log_prob(self, x, cond) -> np.ndarray:
        """Per-sample log density, including the Gaussian base constant."""
        z, log_det = self.forward(x, cond)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.x_dim * LOG_2PI + log_det

    def nll_loss_and_grads(self, x, cond):
        """Loss plus gradients w.r.t. every net parameter (hand-written backprop)."""
        z, log_det, caches = self._forward_impl(x, cond, want_cache=True)
        batch = z.shape[0]
        loss = float(np.mean(0.5 * np.sum(z * z, axis=1) - log_det))
        dxn = z / batch
        # d(loss)/d(log_det contribution) is -1/batch for every sample and block
        dld = np.full((batch, 1), -1.0 / batch)
        grads = [None] * len(self.parameters())
        pos = len(grads)
        for k in range(len(self.nets) - 1, -1, -1):
            m = self.masks[k]
            net = self.nets[k]
            b, s, es, net_cache = caches[k]
            da_out = dxn[:, m]
            db2 = dxn[:, ~m]
            ds = db2 * b * es + dld
            dt = db2
            db = db2 * es
            du = ds * (1.0 - (s / self.s_max) ** 2)
            dnet_in, net_grads = net.backward(np.concatenate([du, dt], axis=1), net_cache)
            n_masked = int(m.sum())
            da = da_out + dnet_in[:, :n_masked]
            prev = np.empty_like(dxn)
            prev[:, m] = da
            prev[:, ~m] = db
            dxn = prev
            pos -= len(net_grads)
            grads[pos : pos + len(net_grads)] = net_grads
        return loss, grads

    def sample(self, cond_vec, n: int, rng: Rng) -> np.ndarray:
        """n conditional draws via the inverse flow on standard-normal latents."""
        cond_vec = np.asarray(cond_vec, dtype=np.float64)
        if cond_vec.shape != (self.cond_dim,):
            raise ShapeError(f"cond must have shape ({self.cond_dim},), got {cond_vec.shape}")
        if n < 1:
            raise ValueError("n must be >= 1")
        z = rng.standard_normal((n, self.x_dim))
        x, _ = self.inverse(z, np.tile(cond_vec, (n, 1)))
        return x

    def posterior_mean_estimate(self, cond_vec, n_s: int, rng: Rng) -> np.ndarray:
        """Empirical mean of n_s conditional samples."""
        return self.sample(cond_vec, n_s, rng).mean(axis=0)


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list (updated in place)."""

    def __init__(self, params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[i] / b1t) / (np.sqrt(self.v[i] / b2t) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p


def train_step(flow: CouplingFlow, opt: Adam, x, cond):
    """One optimizer step on a batch; returns (loss before step, stepped).

    Non-finite gradients skip the step and report stepped=False.
    """
    loss, grads = flow.nll_loss_and_grads(x, cond)
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads):
        return loss, False
    opt.step(grads)
    return loss, True


def train_flow(
    flow: CouplingFlow,
    x_train,
    cond_train,
    x_val,
    cond_val,
    rng: Rng,
    lr=1e-3,
    batch_size=64,
    max_epochs=400,
    patience=20,
    weight_decay=0.0,
    lr_patience=10,
    lr_factor=0.5,
    min_lr=1e-5,
):
    """Maximum-likelihood training with early stopping on validation NLL.

    The learning rate is halved whenever validation loss has not improved
    for `lr_patience` epochs (reduce-on-plateau); training stops once it
    has not improved for `patience` epochs. Returns a history list of
    (epoch, train_loss, val_loss). The flow is left at the weights with
    the best validation loss seen.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    cond_train = np.asarray(cond_train, dtype=np.float64)
    n = x_train.shape[0]
    if n < 1:
        raise ValueError("training set is empty")
    opt = Adam(flow.parameters(), lr=lr, weight_decay=weight_decay)
    have_val = x_val is not None and len(x_val) > 0
    best_val = np.inf
    best_weights = None
    since_best = 0
    history = []
    for epoch in range(max_epochs):
        order = rng.child(epoch).permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, _ = train_step(flow, opt, x_train[idx], cond_train[idx])
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = flow.nll_loss(x_val, cond_val) if have_val else train_loss
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_weights = [p.copy() for p in flow.parameters()]
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
            if since_best % lr_patience == 0 and opt.lr > min_lr:
                # restart from the best weights seen at a lower learning rate
                if best_weights is not None:
                    for p, w in zip(flow.parameters(), best_weights):
                        p[...] = w
                opt = Adam(
                    flow.parameters(),
                    lr=max(opt.lr * lr_factor, min_lr),
                    weight_decay=weight_decay,
                )
    if best_weights is not None:
        for p, w in zip(flow.parameters(), best_weights):
            p[...] = w
    return history


def save_checkpoint(flow: CouplingFlow) -> bytes:
    """Serialize a flow to a versioned binary payload.

    Layout (little-endian): magic "SFLOWCKP" | u32 version | u32 x_dim |
    u32 cond_dim | u32 n_blocks | u32 n_hidden | f64 s_max | u32 hidden
    widths | masks as n_blocks*x_dim bytes | x_mean, x_scale, cond_mean,
    cond_scale as f64 vectors | weight tensors as f64 in parameter order.
    """
    hidden = flow.nets[0].hidden if flow.nets else ()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<IIIII",
            CHECKPOINT_VERSION,
            flow.x_dim,
            flow.cond_dim,
            len(flow.masks),
            len(hidden),
        ),
        struct.pack("<d", flow.s_max),
        struct.pack(f"<{len(hidden)}I", *hidden),
    ]
    for m in flow.masks:
        parts.append(m.astype(np.uint8).tobytes())
    for v in (flow.x_mean, flow.x_scale, flow.cond_mean, flow.cond_scale):
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    for p in flow.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(data: bytes, expected_x_dim=None, expected_cond_dim=None) -> CouplingFlow:
    """Reconstruct a flow from `save_checkpoint` output, validating layout."""
    if len(data) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointError("checkpoint truncated before header")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic bytes")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    version, x_dim, cond_dim, n_blocks, n_hidden = take("<IIIII")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if expected_x_dim is not None and x_dim != expected_x_dim:
        raise CheckpointError(f"checkpoint x_dim {x_dim} does not match expected {expected_x_dim}")
    if expected_cond_dim is not None and cond_dim != expected_cond_dim:
        raise CheckpointError(f"checkpoint cond_dim {cond_dim} does not match expected {expected_cond_dim}")
    (s_max,) = take("<d")
    hidden = take(f"<{n_hidden}I") if n_hidden else ()

    def take_array(count, dtype):
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        if off + size > len(data):
            raise CheckpointError("checkpoint truncated in payload")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += size
        return arr

    masks = [take_array(x_dim, np.uint8).astype(bool) for _ in range(n_blocks)]
    x_mean = take_array(x_dim, "<f8")
    x_scale = take_array(x_dim, "<f8")
    cond_mean = take_array(cond_dim, "<f8")
    cond_scale = take_array(cond_dim, "<f8")

    nets = []
    for m in masks:
        n_masked = int(m.sum())
        n_free = x_dim - n_masked
        net = ConditioningNet(n_masked + cond_dim, hidden, 2 * n_free, rng=None)
        widths = [net.in_dim, *hidden, net.out_dim]
        for i in range(len(widths) - 1):
            net.weights[i] = take_array(widths[i] * widths[i + 1], "<f8").reshape(widths[i], widths[i + 1])
            net.biases[i] = take_array(widths[i + 1], "<f8")
        nets.append(net)
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    out = CouplingFlow(x_dim, cond_dim, masks, nets, s_max=s_max)
    out.set_normalization(x_mean, x_scale, cond_mean, cond_scale)
    return out
