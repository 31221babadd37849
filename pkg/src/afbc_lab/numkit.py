"""Dense numeric core: fixed-architecture MLPs with hand-rolled reverse-mode
gradients, Adam, PopArt output normalization, and parameter checkpoints.

Everything runs in float64 on a single thread; the only external dependency
is numpy for dense linear algebra.
"""

import io

import numpy as np

from .errors import ConfigError, NumericalError, TruncatedFileError, UsageError, VersionError

CHECKPOINT_MAGIC = "AFBC-LAB-CHECKPOINT"
CHECKPOINT_VERSION = 1


class GradTape:
    """Per-parameter gradient accumulators mirroring an MlpNet's shapes."""

    def __init__(self, net):
        self.d_weights = [np.zeros_like(w) for w in net.weights]
        self.d_biases = [np.zeros_like(b) for b in net.biases]

    def zero(self):
        for dw in self.d_weights:
            dw.fill(0.0)
        for db in self.d_biases:
            db.fill(0.0)

    def scale(self, factor):
        for dw in self.d_weights:
            dw *= factor
        for db in self.d_biases:
            db *= factor

    def is_finite(self):
        return all(np.isfinite(g).all() for g in self.d_weights + self.d_biases)


class MlpNet:
    """Feed-forward net with ReLU hidden layers and an identity output layer.

    ``layer_sizes`` lists every width including input and output, e.g.
    (3, 64, 64, 1). Weights are stored as (fan_in, fan_out) matrices and
    initialized uniformly in +-1/sqrt(fan_in).
    """

    def __init__(self, layer_sizes, rng=None, dtype=np.float64):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"layer_sizes must list >= 2 positive widths, got {layer_sizes}")
        self.layer_sizes = sizes
        self.dtype = dtype
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            if rng is None:
                w = np.zeros((fan_in, fan_out), dtype=dtype)
                b = np.zeros(fan_out, dtype=dtype)
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
                b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
            self.weights.append(w)
            self.biases.append(b)
        self._cache = None

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def copy(self):
        clone = MlpNet(self.layer_sizes, rng=None, dtype=self.dtype)
        clone.load_flat(self.to_flat())
        return clone

    def copy_from(self, other):
        if other.layer_sizes != self.layer_sizes:
            raise ConfigError("cannot copy parameters between different architectures")
        for dst, src in zip(self.weights + self.biases, other.weights + other.biases):
            dst[...] = src

    def polyak_from(self, other, tau):
        """theta <- (1 - tau) * theta + tau * theta_other."""
        for dst, src in zip(self.weights + self.biases, other.weights + other.biases):
            dst *= 1.0 - tau
            dst += tau * src

    def forward(self, x):
        """Forward pass caching intermediates for backward.

        Accepts a single input vector or a (batch, in_dim) matrix and returns
        the matching shape.
        """
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(
                f"input width {x.shape[-1] if x.ndim else 0} does not match net input {self.in_dim}"
            )
        activations = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            activations.append(h)
        self._cache = activations
        return h[0] if single else h

    def backward(self, output_grad, tape=None):
        """Accumulates dL/dparam into ``tape`` given dL/doutput.

        Gradients are summed over the batch dimension; callers divide by the
        batch size when they want means. Returns (tape, input_grad).
        """
        if self._cache is None:
            raise UsageError("backward called before forward")
        if tape is None:
            tape = GradTape(self)
        g = np.asarray(output_grad, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        activations = self._cache
        if g.shape != activations[-1].shape:
            raise ConfigError(
                f"output_grad shape {g.shape} does not match forward output {activations[-1].shape}"
            )
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = activations[i]
            tape.d_weights[i] += a_in.T @ g
            tape.d_biases[i] += g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
                g = g * (activations[i] > 0.0)
        return tape, g

    def to_flat(self):
        return np.concatenate([p.ravel() for p in self.weights + self.biases])

    def load_flat(self, flat):
        flat = np.asarray(flat, dtype=self.dtype)
        expected = sum(p.size for p in self.weights + self.biases)
        if flat.size != expected:
            raise ConfigError(f"flat parameter vector has {flat.size} entries, expected {expected}")
        offset = 0
        for p in self.weights + self.biases:
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def check_finite(self, context=""):
        for p in self.weights + self.biases:
            if not np.isfinite(p).all():
                raise NumericalError(f"non-finite parameters detected {context}".strip())


class AdamState:
    """First/second moment accumulators plus the step counter for one net."""

    def __init__(self, net, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in net.weights + net.biases]
        self.v = [np.zeros_like(p) for p in net.weights + net.biases]


def adam_step(net, tape, state):
    """One bias-corrected Adam update of ``net`` from the gradients in ``tape``."""
    if not tape.is_finite():
        raise NumericalError("NaN/Inf gradient in adam_step")
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate * np.sqrt(1.0 - state.beta2**t) / (1.0 - state.beta1**t)
    params = net.weights + net.biases
    grads = tape.d_weights + tape.d_biases
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * m / (np.sqrt(v) + state.eps)
    net.check_finite(context="after adam_step")


class PopArtStats:
    """Running first/second moments of critic targets with last-layer rescaling.

    The step-size schedule is adaptive so early updates forget the (large)
    initialization quickly: the default ``bias_corrected`` schedule uses
    beta_t = beta / (1 - (1 - beta)^t), which makes the tracked moments an
    initialization-free exponential moving average. A plain ``harmonic``
    schedule beta_t = beta / (1 + t*beta) is also available.
    """

    SCHEDULES = ("bias_corrected", "harmonic")

    def __init__(self, beta=3e-4, sigma_min=1e-4, nu_init=100.0, schedule="bias_corrected"):
        if schedule not in self.SCHEDULES:
            raise ConfigError(f"unknown PopArt schedule {schedule!r}")
        if beta <= 0 or not 0 < sigma_min:
            raise ConfigError("PopArt beta and sigma_min must be positive")
        self.beta = float(beta)
        self.sigma_min = float(sigma_min)
        self.schedule = schedule
        self.mu = 0.0
        self.nu = float(nu_init)
        self.update_count = 0
        self.skipped_samples = 0

    @property
    def sigma(self):
        return float(np.sqrt(max(self.nu - self.mu**2, self.sigma_min**2)))

    def _step_size(self):
        t = self.update_count
        if self.schedule == "bias_corrected":
            return self.beta / (1.0 - (1.0 - self.beta) ** t)
        return self.beta / (1.0 + t * self.beta)

    def normalize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mu) / self.sigma

    def denormalize(self, z):
        return self.sigma * np.asarray(z, dtype=np.float64) + self.mu

    def update(self, targets):
        """Moves mu/nu toward the batch statistics; returns (old_mu, old_sigma).

        Non-finite targets are skipped and counted, never propagated.
        """
        targets = np.asarray(targets, dtype=np.float64).ravel()
        finite = np.isfinite(targets)
        self.skipped_samples += int((~finite).sum())
        targets = targets[finite]
        old_mu, old_sigma = self.mu, self.sigma
        if targets.size == 0:
            return old_mu, old_sigma
        self.update_count += 1
        step = self._step_size()
        self.mu += step * (targets.mean() - self.mu)
        self.nu += step * (np.square(targets).mean() - self.nu)
        return old_mu, old_sigma


def rescale_output_layer(net, old_mu, old_sigma, new_mu, new_sigma):
    """Rewrites the last layer so sigma_new*f_new(x)+mu_new == sigma_old*f_old(x)+mu_old."""
    if new_mu == old_mu and new_sigma == old_sigma:
        return
    w, b = net.weights[-1], net.biases[-1]
    w *= old_sigma / new_sigma
    b[...] = (old_sigma * b + old_mu - new_mu) / new_sigma


def popart_update(stats, net, targets):
    """Updates the statistics and rescales ``net``'s output layer so the
    de-normalized function sigma*f(x)+mu is preserved exactly.
    """
    old_mu, old_sigma = stats.update(targets)
    rescale_output_layer(net, old_mu, old_sigma, stats.mu, stats.sigma)


def save_checkpoint(path, nets, float_width=32):
    """Writes named nets as a text header plus a flat little-endian float blob.

    Header grammar (one field per line, terminated by ``---``)::

        AFBC-LAB-CHECKPOINT v1
        byte_order little
        float_width <32|64>
        net <name> <w0,w1,...>
        ---

    The blob concatenates each net's parameters in header order: per layer,
    the weight matrix in row-major order, then the bias vector.
    """
    if float_width not in (32, 64):
        raise ConfigError("float_width must be 32 or 64")
    dtype = np.dtype("<f4") if float_width == 32 else np.dtype("<f8")
    header = io.StringIO()
    header.write(f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n")
    header.write("byte_order little\n")
    header.write(f"float_width {float_width}\n")
    blobs = []
    for name, net in nets.items():
        if any(ch.isspace() for ch in name):
            raise ConfigError(f"net name {name!r} must not contain whitespace")
        header.write(f"net {name} {','.join(str(s) for s in net.layer_sizes)}\n")
        blobs.append(net.to_flat().astype(dtype).tobytes())
    header.write("---\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Reads a checkpoint back into freshly constructed nets (dict by name)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = b"---\n"
    idx = raw.find(sep)
    if idx < 0:
        raise TruncatedFileError("checkpoint header terminator missing")
    lines = raw[:idx].decode("ascii").splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ConfigError("not an afbc-lab checkpoint")
    version = lines[0].split("v")[-1]
    if version != str(CHECKPOINT_VERSION):
        raise VersionError(f"unsupported checkpoint version {version}")
    fields = {}
    net_specs = []
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        if key == "net":
            name, _, sizes = value.partition(" ")
            net_specs.append((name, [int(s) for s in sizes.split(",")]))
        else:
            fields[key] = value
    if fields.get("byte_order") != "little":
        raise ConfigError(f"unsupported byte order {fields.get('byte_order')!r}")
    width = int(fields.get("float_width", 0))
    if width not in (32, 64):
        raise ConfigError(f"unsupported float width {width}")
    dtype = np.dtype("<f4") if width == 32 else np.dtype("<f8")
    payload = raw[idx + len(sep) :]
    nets = {}
    offset = 0
    for name, sizes in net_specs:
        net = MlpNet(sizes)
        count = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        nbytes = count * dtype.itemsize
        chunk = payload[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise TruncatedFileError(f"checkpoint payload truncated in net {name!r}")
        net.load_flat(np.frombuffer(chunk, dtype=dtype).astype(np.float64))
        nets[name] = net
        offset += nbytes
    return nets
