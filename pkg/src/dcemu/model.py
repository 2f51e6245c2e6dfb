"""
Discrete-continuous Bayesian emulator networks.

Each network maps an input raster ``[B, H, W, C]`` to, per pixel, a surface
reflectance estimate for every band, a log aleatoric variance for every band
and one clear-sky logit.  Concrete dropout in front of each hidden layer makes
the forward pass stochastic; :func:`mc_predict` turns repeated passes into
predictive moments and :func:`static_predict` runs the deterministic network.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConcreteDropoutLayer, Parameter, Tensor
from .errors import ConfigError, DataError, DimensionError, DomainError, TrainingError

ARCHITECTURES = ("dcfc", "dccnn", "dcvdsr")
LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass
class ModelConfig:
    architecture: str = "dcfc"
    in_channels: int = 8
    bands: int = 6
    hidden_layers: int = 3
    hidden_units: int = 512
    tau: float = 1e-5
    prior_length_scale: float = 1e-14
    temperature: float = 0.1
    init_dropout: float = 0.1
    init_log_variance: float = -5.0
    dataset_size: int = 1
    dropout_on_head: bool = False
    per_band_variance: bool = True
    seed: int = 0

    def __post_init__(self):
        self.architecture = str(self.architecture).lower()
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; "
                              f"expected one of {', '.join(ARCHITECTURES)}")
        for name in ("in_channels", "bands", "hidden_layers", "hidden_units", "dataset_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.temperature <= 0 or self.tau <= 0 or self.prior_length_scale < 0:
            raise ConfigError("temperature and tau must be positive, length scale non-negative")
        if not 0.0 < self.init_dropout < 1.0:
            raise ConfigError("init_dropout must lie in (0, 1)")

    @property
    def out_channels(self):
        return 2 * self.bands + 1 if self.per_band_variance else self.bands + 2

    def to_text(self):
        """Canonical ``key=value`` lines sorted by key."""
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(dataclasses.asdict(self).items()))

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _parse(value.strip(), types[key])
        return cls(**kwargs)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value, type_name):
    if type_name == "bool":
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


@dataclass
class DcPrediction:
    """Per-pixel network outputs: reflectance, log variance, clear-sky logit.

    Fields hold :class:`Tensor` objects while training and plain arrays after
    inference.
    """

    yhat: object
    log_var: object
    logit: object

    def numpy(self):
        def arr(x):
            return x.data if isinstance(x, Tensor) else np.asarray(x)
        return DcPrediction(arr(self.yhat), arr(self.log_var), arr(self.logit))

    @property
    def variance(self):
        s = self.log_var.data if isinstance(self.log_var, Tensor) else self.log_var
        return np.exp(np.clip(s, *LOG_VAR_RANGE))

    @property
    def p_clear(self):
        phi = self.logit.data if isinstance(self.logit, Tensor) else self.logit
        return ad._sigmoid(phi[..., 0])


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    p_clear: np.ndarray
    samples: int


@dataclass
class Batch:
    inputs: np.ndarray
    target: np.ndarray
    clear: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.clear = np.asarray(self.clear)
        if not np.isin(self.clear, (0, 1)).all():
            raise DataError("clear-sky labels must be 0 or 1")
        self.clear = self.clear.astype(float)
        # cloudy pixels carry no valid reflectance
        target = np.asarray(self.target, dtype=float)
        bad = ~np.isfinite(target) & (self.clear[..., None] > 0)
        if bad.any():
            raise DataError("teacher reflectance is non-finite at a clear pixel")
        self.target = np.where(self.clear[..., None] > 0, target, 0.0)
        if self.inputs.shape[:-1] != self.clear.shape or self.target.shape[:-1] != self.clear.shape:
            raise DimensionError(f"batch shapes disagree: inputs {self.inputs.shape}, "
                                 f"target {self.target.shape}, clear {self.clear.shape}")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], self.target[idx], self.clear[idx])


# ---------------------------------------------------------------------------
# networks


@dataclass
class _Layer:
    weight: Parameter
    bias: Parameter
    dropout: ConcreteDropoutLayer | None = None


class DcModel:
    """DCFC, DCCNN or DCVDSR network built from a :class:`ModelConfig`."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        conv = config.architecture != "dcfc"
        self.hidden = []
        fan = config.in_channels
        for i in range(config.hidden_layers):
            units = config.hidden_units
            k_shape = (3, 3, fan, units) if conv else (fan, units)
            fan_in = 9 * fan if conv else fan
            w = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=k_shape),
                          "weight", f"hidden{i}.weight")
            b = Parameter(np.zeros(units), "bias", f"hidden{i}.bias")
            drop = ConcreteDropoutLayer.create(fan, config.init_dropout, config.temperature,
                                               name=f"hidden{i}.dropout")
            self.hidden.append(_Layer(w, b, drop))
            fan = units
        n_out = config.out_channels
        k_shape = (3, 3, fan, n_out) if conv else (fan, n_out)
        fan_in = 9 * fan if conv else fan
        limit = 0.1 / math.sqrt(fan_in)
        w = Parameter(rng.uniform(-limit, limit, size=k_shape), "weight", "head.weight")
        head_bias = np.zeros(n_out)
        nb = config.bands
        head_bias[nb:n_out - 1] = config.init_log_variance
        b = Parameter(head_bias, "bias", "head.bias")
        drop = None
        if config.dropout_on_head:
            drop = ConcreteDropoutLayer.create(fan, config.init_dropout, config.temperature,
                                               name="head.dropout")
        self.head = _Layer(w, b, drop)
        self.set_dataset_size(config.dataset_size)

    @property
    def layers(self):
        return [*self.hidden, self.head]

    def dropout_layers(self):
        return [l.dropout for l in self.layers if l.dropout is not None]

    def parameters(self):
        """All trainable parameters in declaration order."""
        params = []
        for layer in self.layers:
            if layer.dropout is not None:
                params.append(layer.dropout.logit)
            params.extend((layer.weight, layer.bias))
        return params

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def dropout_rates(self):
        return [d.rate for d in self.dropout_layers()]

    def set_dataset_size(self, n):
        self.config.dataset_size = int(n)
        for d in self.dropout_layers():
            d.set_scales(self.config.prior_length_scale, self.config.tau, int(n))

    def noise_shapes(self, input_shape):
        """Noise array shape per dropout layer: one gate per patch and feature,
        shared across spatial positions."""
        lead = (input_shape[0],) + (1,) * (len(input_shape) - 2)
        shapes = []
        fan = self.config.in_channels
        for layer in self.layers:
            if layer.dropout is not None:
                shapes.append(lead + (fan,))
            fan = layer.weight.shape[-1]
        return shapes

    def sample_noise(self, input_shape, rng):
        eps = np.finfo(float).tiny
        return [np.clip(rng.random(s), eps, 1.0 - 1e-16) for s in self.noise_shapes(input_shape)]

    def _apply(self, layer, h):
        if self.config.architecture == "dcfc":
            return ad.dense(h, layer.weight, layer.bias)
        return ad.conv2d_same(h, layer.weight, layer.bias)

    def forward(self, x, noise=None, rng=None, stochastic=True):
        """One pass of the network.

        With ``stochastic`` the concrete gates use ``noise`` (list of arrays,
        one per dropout layer) or fresh draws from ``rng``; otherwise each
        gate is replaced by its expectation, which for inverted dropout is
        the identity.
        """
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise DimensionError(f"model expects [B,H,W,{self.config.in_channels}] input, "
                                 f"got {x.shape}")
        fast = False
        if stochastic and noise is None:
            if rng is None:
                raise ValueError("stochastic forward pass needs noise or rng")
            if ad.grad_enabled():
                noise = self.sample_noise(x.shape, rng)
            else:
                fast = True
                noise = (np.asarray(rng.logistic(size=s)) for s in self.noise_shapes(x.shape))
        noise = iter(noise or ())
        gate = _inference_gate if fast else ad.concrete_gate
        h = x
        first = None
        n_hidden = len(self.hidden)
        for i, layer in enumerate(self.hidden):
            if stochastic:
                h = gate(layer.dropout, h, next(noise))
            h = ad.relu(self._apply(layer, h))
            if i == 0:
                first = h
            if i == n_hidden - 1 and self.config.architecture == "dcvdsr" and n_hidden > 1:
                h = ad.add_same(h, first)
        if stochastic and self.head.dropout is not None:
            h = gate(self.head.dropout, h, next(noise))
        out = self._apply(self.head, h)
        return self._split(out)

    def _split(self, out):
        nb = self.config.bands
        yhat = ad.take_channels(out, 0, nb)
        if self.config.per_band_variance:
            log_var = ad.take_channels(out, nb, 2 * nb)
            phi = ad.take_channels(out, 2 * nb, 2 * nb + 1)
        else:
            s = ad.take_channels(out, nb, nb + 1)
            log_var = s * np.ones(nb)
            phi = ad.take_channels(out, nb + 1, nb + 2)
        return DcPrediction(yhat, log_var, phi)

    def regularizer(self):
        pairs = [(l.dropout, l.weight) for l in self.layers if l.dropout is not None]
        return ad.kl_regularizer(pairs)


def _inference_gate(layer, h, noise_logit):
    """Concrete gate without graph recording, from logistic noise ``log u - log(1-u)``.

    Computes the keep factor ``(1 - z) / (1 - p) = 1 / ((1 - p)(1 + exp(a)))``
    with ``a = (logit p + noise) / temperature`` in place on the noise buffer.
    """
    a = noise_logit
    a += float(layer.logit.data)
    a *= 1.0 / layer.temperature
    with np.errstate(over="ignore"):
        np.exp(a, out=a)
    a += 1.0
    a *= 1.0 - layer.rate
    np.reciprocal(a, out=a)
    return Tensor(h.data * a)


def build_model(config):
    if not isinstance(config, ModelConfig):
        config = ModelConfig(**config)
    return DcModel(dataclasses.replace(config))


# ---------------------------------------------------------------------------
# loss


def loss_components(pred, batch):
    """Classification and conditional-regression terms, each averaged over all pixels."""
    clear = batch.clear
    d = clear.size
    if d == 0:
        raise DataError("batch contains no pixels")
    if pred.yhat.shape != batch.target.shape:
        raise DimensionError(f"prediction {pred.yhat.shape} vs target {batch.target.shape}")
    phi = ad.reshape(pred.logit, clear.shape)
    bce = ad.tsum(ad.softplus(phi) - phi * clear) * (1.0 / d)
    s = ad.clip(pred.log_var, *LOG_VAR_RANGE)
    resid = pred.yhat - batch.target
    per_band = 0.5 * ad.exp(-s) * resid * resid + 0.5 * s
    reg = ad.tsum(per_band * clear[..., None]) * (1.0 / d)
    return bce, reg


def dc_loss(pred, batch):
    bce, reg = loss_components(pred, batch)
    return bce + reg


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    classification: float
    regression: float
    kl: float
    dropout_rates: list
    extra: dict = field(default_factory=dict)


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def train(model, data, epochs, batch_size=16, lr=1e-4, seed=0, optimizer=None,
          callback=None, log=None, max_steps=None):
    """Minimize the two-part loss plus the variational regularizer with Adam.

    ``data`` is a :class:`Batch` holding every training patch.  Minibatches are
    reshuffled each epoch and dropout noise is redrawn on every forward pass.
    ``callback(epoch_record, model)`` runs after each epoch and may fill
    ``epoch_record.extra``.
    """
    if len(data) == 0:
        raise DataError("training set is empty")
    model.set_dataset_size(data.clear.size)
    opt = optimizer or ad.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    log = log or TrainingLog()
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(4)
        nb = 0
        for bi, start in enumerate(range(0, len(data), batch_size)):
            batch = data.subset(order[start:start + batch_size])
            pred = model.forward(batch.inputs, rng=rng)
            bce, reg = loss_components(pred, batch)
            kl = model.regularizer()
            for term, t in (("classification", bce), ("regression", reg), ("kl", kl)):
                if not np.isfinite(t.data):
                    raise TrainingError(f"non-finite {term} loss at epoch {epoch}, batch {bi}",
                                        epoch=epoch, batch=bi, term=term)
            total = bce + reg + kl
            total.backward()
            try:
                opt.step()
            except TrainingError as exc:
                exc.epoch, exc.batch = epoch, bi
                raise
            vals = (total.item(), bce.item(), reg.item(), kl.item())
            sums += vals
            nb += 1
            log.step_losses.append(vals[0])
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        mean = sums / max(nb, 1)
        rec = EpochRecord(epoch, *map(float, mean), model.dropout_rates())
        if callback is not None:
            callback(rec, model)
        log.epochs.append(rec)
        if max_steps is not None and steps >= max_steps:
            break
    return log


# ---------------------------------------------------------------------------
# inference


def predictive_moments(yhat_samples, var_samples, logit_samples=None):
    """Monte-Carlo mean and variance from ``T`` stacked samples (axis 0).

    ``Var = mean(yhat^2 + sigma^2) - mean(yhat)^2``, evaluated as the mean
    aleatoric variance plus the spread of the means so that rounding cannot
    push it below the aleatoric part or below zero.
    """
    yhat_samples = np.asarray(yhat_samples, dtype=float)
    var_samples = np.asarray(var_samples, dtype=float)
    t = yhat_samples.shape[0]
    if t < 1:
        raise DomainError("need at least one sample")
    mean = yhat_samples.sum(axis=0) / t
    spread = (yhat_samples ** 2).sum(axis=0) / t - mean ** 2
    variance = var_samples.sum(axis=0) / t + np.maximum(spread, 0.0)
    p = None
    if logit_samples is not None:
        p = ad._sigmoid(np.asarray(logit_samples, dtype=float)).sum(axis=0) / t
    return mean, variance, p


def mc_predict(model, inputs, T=10, seed=0, workers=1):
    """Predictive distribution from ``T`` stochastic forward passes.

    Every pass draws its noise from its own generator spawned from ``seed``,
    so results do not depend on ``workers``.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    inputs = np.asarray(inputs, dtype=float)
    streams = np.random.SeedSequence(seed).spawn(T)

    def one_pass(ss):
        pred = model.forward(inputs, rng=np.random.default_rng(ss))
        return pred.yhat.data, pred.variance, pred.logit.data[..., 0]

    # graph recording is switched off once here, not per worker thread
    with ad.no_grad():
        if workers > 1 and T > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one_pass, streams))
        else:
            results = [one_pass(ss) for ss in streams]
    ys, vs, phis = (np.stack(r) for r in zip(*results))
    mean, var, p = predictive_moments(ys, vs, phis)
    return PredictiveDistribution(mean, var, p, T)


def static_predict(model, inputs):
    """Single deterministic pass with every gate at its expectation."""
    with ad.no_grad():
        return model.forward(np.asarray(inputs, dtype=float), stochastic=False).numpy()


def classify_cloud(p_clear, threshold):
    """1 (clear) where ``p_clear > threshold``; ties count as not clear."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(p_clear) > threshold).astype(np.uint8)
