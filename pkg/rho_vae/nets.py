"""Dense encoder/decoder networks with explicit backward passes, plus Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidParameterError, ShapeMismatchError, StaleCacheError
from .posterior import Ar1Posterior, DiagPosterior

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
POSTERIOR_KINDS = ("diag", "ar1")
INIT_SCHEMES = ("uniform", "zeros")

# Pre-activation windows for the squashed heads: tanh(9) < 1 and exp(+-30) is finite
# and positive in float64, so encode() never emits an invalid posterior.
RHO_RAW_LIMIT = 9.0
LOG_SCALE_LIMIT = 30.0


def _activate(name: str, pre: Array) -> Array:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    if name == "sigmoid":
        # Split by sign so exp never overflows.
        out = np.empty_like(pre)
        pos = pre >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-pre[pos]))
        exp_neg = np.exp(pre[~pos])
        out[~pos] = exp_neg / (1.0 + exp_neg)
        return out
    return pre.copy()


def _activation_slope(name: str, out: Array) -> Union[Array, float]:
    if name == "relu":
        return (out > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - out * out
    if name == "sigmoid":
        return out * (1.0 - out)
    return 1.0


@dataclass
class DenseLayer:
    weight: Array  # (fan_in, fan_out)
    bias: Array
    activation: str = "identity"
    grad_weight: Array = field(init=False, repr=False)
    grad_bias: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatchError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not form a dense layer"
            )
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class ForwardCache:
    owner: int
    version: int
    inputs: List[Array]
    outputs: List[Array]


class Mlp:
    """Feed-forward stack of dense layers.

    `forward` returns the output together with a cache; `backward` accumulates into
    the layers' gradient buffers and returns the gradient with respect to the input.
    A cache is stale once the parameters have been stepped (see `mark_updated`).
    """

    def __init__(self, layers: Sequence[DenseLayer]) -> None:
        if not layers:
            raise InvalidParameterError("an Mlp needs at least one layer")
        for previous, current in zip(layers, layers[1:]):
            if previous.fan_out != current.fan_in:
                raise ShapeMismatchError(
                    f"layer output {previous.fan_out} does not feed layer input {current.fan_in}"
                )
        self.layers: List[DenseLayer] = list(layers)
        self.version = 0

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: Optional[np.random.Generator] = None,
        init: str = "uniform",
    ) -> "Mlp":
        if len(sizes) != len(activations) + 1:
            raise ShapeMismatchError("need exactly one activation per layer")
        if init not in INIT_SCHEMES:
            raise InvalidParameterError(f"unknown init scheme {init!r}")
        if init == "uniform" and rng is None:
            raise InvalidParameterError("uniform init needs a random generator")
        layers = []
        for fan_in, fan_out, activation in zip(sizes[:-1], sizes[1:], activations):
            if init == "zeros":
                weight = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / math.sqrt(fan_in)
                weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append(DenseLayer(weight=weight, bias=np.zeros(fan_out), activation=activation))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    def forward(self, x: ArrayLike) -> Tuple[Array, ForwardCache]:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeMismatchError(f"expected input of shape (batch, {self.in_dim}), got {h.shape}")
        inputs: List[Array] = []
        outputs: List[Array] = []
        for layer in self.layers:
            inputs.append(h)
            h = _activate(layer.activation, h @ layer.weight + layer.bias)
            outputs.append(h)
        return h, ForwardCache(owner=id(self), version=self.version, inputs=inputs, outputs=outputs)

    def backward(self, cache: Optional[ForwardCache], upstream: ArrayLike) -> Array:
        if cache is None or cache.owner != id(self) or len(cache.inputs) != len(self.layers):
            raise StaleCacheError("backward called without a forward cache from this network")
        if cache.version != self.version:
            raise StaleCacheError("forward cache predates the last parameter update")
        delta_out = np.asarray(upstream, dtype=np.float64)
        if delta_out.shape != cache.outputs[-1].shape:
            raise ShapeMismatchError(
                f"upstream shape {delta_out.shape} != output shape {cache.outputs[-1].shape}"
            )
        for layer, layer_in, layer_out in zip(
            reversed(self.layers), reversed(cache.inputs), reversed(cache.outputs)
        ):
            delta = delta_out * _activation_slope(layer.activation, layer_out)
            layer.grad_weight += layer_in.T @ delta
            layer.grad_bias += delta.sum(axis=0)
            delta_out = delta @ layer.weight.T
        return delta_out

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.grad_weight.fill(0.0)
            layer.grad_bias.fill(0.0)

    def mark_updated(self) -> None:
        self.version += 1

    def named_parameters(self, prefix: str) -> Dict[str, Array]:
        params: Dict[str, Array] = {}
        for index, layer in enumerate(self.layers):
            params[f"{prefix}.{index}.weight"] = layer.weight
            params[f"{prefix}.{index}.bias"] = layer.bias
        return params

    def named_gradients(self, prefix: str) -> Dict[str, Array]:
        grads: Dict[str, Array] = {}
        for index, layer in enumerate(self.layers):
            grads[f"{prefix}.{index}.weight"] = layer.grad_weight
            grads[f"{prefix}.{index}.bias"] = layer.grad_bias
        return grads

    def describe(self) -> List[Dict[str, Any]]:
        return [
            {"in": layer.fan_in, "out": layer.fan_out, "activation": layer.activation}
            for layer in self.layers
        ]


@dataclass
class EncoderHeads:
    mu_head: Mlp
    logvar_head: Optional[Mlp] = None
    log_s_head: Optional[Mlp] = None
    rho_raw_head: Optional[Mlp] = None

    def __post_init__(self) -> None:
        diag = self.logvar_head is not None
        ar1 = self.log_s_head is not None or self.rho_raw_head is not None
        if diag == ar1:
            raise InvalidParameterError("exactly one head mode (diag or ar1) must be active")
        if ar1 and (self.log_s_head is None or self.rho_raw_head is None):
            raise InvalidParameterError("ar1 mode needs both the log_s and rho_raw heads")
        heads = self.named_heads()
        widths = {head.in_dim for head in heads.values()}
        if len(widths) != 1:
            raise ShapeMismatchError(f"heads disagree on their input width: {sorted(widths)}")
        latent = self.mu_head.out_dim
        expected = {"mu": latent, "logvar": latent, "log_s": 1, "rho_raw": 1}
        for name, head in heads.items():
            if head.out_dim != expected[name]:
                raise ShapeMismatchError(f"{name} head must output {expected[name]} values")

    @property
    def kind(self) -> str:
        return "diag" if self.logvar_head is not None else "ar1"

    @property
    def in_dim(self) -> int:
        return self.mu_head.in_dim

    def named_heads(self) -> Dict[str, Mlp]:
        heads = {"mu": self.mu_head}
        if self.logvar_head is not None:
            heads["logvar"] = self.logvar_head
        if self.log_s_head is not None:
            heads["log_s"] = self.log_s_head
        if self.rho_raw_head is not None:
            heads["rho_raw"] = self.rho_raw_head
        return heads


@dataclass
class EncoderCache:
    trunk: ForwardCache
    heads: Dict[str, ForwardCache]
    raw: Dict[str, Array]


def head_parameter_count(kind: str, hidden: int, latent: int) -> int:
    if kind == "diag":
        return 2 * hidden * latent + 2 * latent
    if kind == "ar1":
        return hidden * latent + latent + 2 * hidden + 2
    raise InvalidParameterError(f"unknown posterior kind {kind!r}")


class Encoder:
    def __init__(self, trunk: Mlp, heads: EncoderHeads) -> None:
        if heads.in_dim != trunk.out_dim:
            raise ShapeMismatchError(
                f"head input width {heads.in_dim} != trunk output width {trunk.out_dim}"
            )
        self.trunk = trunk
        self.heads = heads

    @property
    def kind(self) -> str:
        return self.heads.kind

    @property
    def latent_dim(self) -> int:
        return self.heads.mu_head.out_dim

    def forward(self, x: ArrayLike) -> Tuple[Union[DiagPosterior, Ar1Posterior], EncoderCache]:
        h, trunk_cache = self.trunk.forward(x)
        raw: Dict[str, Array] = {}
        caches: Dict[str, ForwardCache] = {}
        for name, head in self.heads.named_heads().items():
            raw[name], caches[name] = head.forward(h)
        cache = EncoderCache(trunk=trunk_cache, heads=caches, raw=raw)

        mu = raw["mu"]
        if self.kind == "diag":
            logvar = np.clip(raw["logvar"], -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
            return DiagPosterior(mu=mu, s=np.exp(logvar)), cache
        log_s = np.clip(raw["log_s"][:, 0], -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
        rho_raw = np.clip(raw["rho_raw"][:, 0], -RHO_RAW_LIMIT, RHO_RAW_LIMIT)
        return Ar1Posterior(mu=mu, rho=np.tanh(rho_raw), s=np.exp(log_s)), cache

    def backward(self, cache: EncoderCache, grads: Dict[str, ArrayLike]) -> Array:
        """Backpropagate gradients w.r.t. the raw head outputs; returns d/dx."""
        upstream_h = None
        for name, head in self.heads.named_heads().items():
            grad = np.asarray(grads[name], dtype=np.float64)
            raw = cache.raw[name]
            if name == "mu":
                head_grad = grad
            else:
                limit = RHO_RAW_LIMIT if name == "rho_raw" else LOG_SCALE_LIMIT
                head_grad = grad.reshape(raw.shape) * (np.abs(raw) < limit)
            contribution = head.backward(cache.heads.get(name), head_grad)
            upstream_h = contribution if upstream_h is None else upstream_h + contribution
        return self.trunk.backward(cache.trunk, upstream_h)

    def networks(self) -> Dict[str, Mlp]:
        nets = {"encoder.trunk": self.trunk}
        for name, head in self.heads.named_heads().items():
            nets[f"encoder.{name}_head"] = head
        return nets


def encode(encoder: Encoder, x: ArrayLike) -> Union[DiagPosterior, Ar1Posterior]:
    """Posterior for a single input vector."""
    x_arr = np.asarray(x, dtype=np.float64)
    if x_arr.ndim != 1:
        raise ShapeMismatchError(f"encode takes one input vector, got shape {x_arr.shape}")
    posterior, _ = encoder.forward(x_arr[np.newaxis, :])
    if isinstance(posterior, DiagPosterior):
        return DiagPosterior(mu=posterior.mu[0], s=posterior.s[0])
    return Ar1Posterior(mu=posterior.mu[0], rho=posterior.rho[0], s=posterior.s[0])


def decode(decoder: Mlp, z: ArrayLike) -> Array:
    """Decoder output for a single latent vector."""
    z_arr = np.asarray(z, dtype=np.float64)
    if z_arr.ndim != 1:
        raise ShapeMismatchError(f"decode takes one latent vector, got shape {z_arr.shape}")
    out, _ = decoder.forward(z_arr[np.newaxis, :])
    return out[0]


class Vae:
    """Encoder, decoder and the bookkeeping the optimizer needs."""

    def __init__(self, encoder: Encoder, decoder: Mlp, image_shape: Tuple[int, int]) -> None:
        if decoder.in_dim != encoder.latent_dim:
            raise ShapeMismatchError("decoder input width must equal the latent dimension")
        if decoder.out_dim != encoder.trunk.in_dim:
            raise ShapeMismatchError("decoder output width must equal the encoder input width")
        if image_shape[0] * image_shape[1] != decoder.out_dim:
            raise ShapeMismatchError(f"image shape {image_shape} does not hold {decoder.out_dim} pixels")
        self.encoder = encoder
        self.decoder = decoder
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))

    @classmethod
    def build(
        cls,
        posterior_kind: str,
        recon_loss: str,
        image_shape: Tuple[int, int],
        hidden: int,
        latent: int,
        seed: int,
        init: str = "uniform",
    ) -> "Vae":
        """Encoder n -> hidden -> heads, decoder latent -> hidden -> n, relu hidden units.

        Each network part draws its initial weights from its own stream, so the trunk
        and decoder are bit-identical between the diag and ar1 variants.
        """
        if posterior_kind not in POSTERIOR_KINDS:
            raise InvalidParameterError(f"unknown posterior kind {posterior_kind!r}")
        n_pixels = int(image_shape[0]) * int(image_shape[1])
        output_activation = "sigmoid" if recon_loss == "bernoulli" else "identity"

        def stream(part: int) -> np.random.Generator:
            return np.random.default_rng((seed, 0, part))

        trunk = Mlp.build([n_pixels, hidden], ["relu"], stream(0), init)
        decoder = Mlp.build([latent, hidden, n_pixels], ["relu", output_activation], stream(1), init)
        mu_head = Mlp.build([hidden, latent], ["identity"], stream(2), init)
        if posterior_kind == "diag":
            heads = EncoderHeads(
                mu_head=mu_head,
                logvar_head=Mlp.build([hidden, latent], ["identity"], stream(3), init),
            )
        else:
            heads = EncoderHeads(
                mu_head=mu_head,
                log_s_head=Mlp.build([hidden, 1], ["identity"], stream(4), init),
                rho_raw_head=Mlp.build([hidden, 1], ["identity"], stream(5), init),
            )
        return cls(Encoder(trunk, heads), decoder, image_shape)

    @property
    def kind(self) -> str:
        return self.encoder.kind

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    def networks(self) -> Dict[str, Mlp]:
        nets = self.encoder.networks()
        nets["decoder"] = self.decoder
        return nets

    def parameters(self) -> Dict[str, Array]:
        params: Dict[str, Array] = {}
        for prefix, net in self.networks().items():
            params.update(net.named_parameters(prefix))
        return params

    def gradients(self) -> Dict[str, Array]:
        grads: Dict[str, Array] = {}
        for prefix, net in self.networks().items():
            grads.update(net.named_gradients(prefix))
        return grads

    def zero_grad(self) -> None:
        for net in self.networks().values():
            net.zero_grad()

    def mark_updated(self) -> None:
        for net in self.networks().values():
            net.mark_updated()

    def parameter_norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(value)) for name, value in self.parameters().items()}

    def describe(self) -> Dict[str, Any]:
        """Architecture echo used by manifests and the posterior-swap tests."""
        hidden = self.encoder.trunk.out_dim
        return {
            "posterior_kind": self.kind,
            "image_shape": list(self.image_shape),
            "trunk": self.encoder.trunk.describe(),
            "heads": {name: head.describe() for name, head in self.encoder.heads.named_heads().items()},
            "decoder": self.decoder.describe(),
            "head_parameters": head_parameter_count(self.kind, hidden, self.latent_dim),
        }


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise InvalidParameterError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidParameterError("beta1 and beta2 must lie in [0, 1)")
        if self.step < 0:
            raise InvalidParameterError("step counter cannot be negative")


def adam_step(params: Dict[str, Array], grads: Dict[str, Array], state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place to `params`."""
    if params.keys() != grads.keys():
        raise ShapeMismatchError("parameters and gradients must have the same names")
    for name, value in params.items():
        if value.shape != grads[name].shape:
            raise ShapeMismatchError(f"{name}: gradient shape {grads[name].shape} != {value.shape}")
        if name in state.m and state.m[name].shape != value.shape:
            raise ShapeMismatchError(f"{name}: moment buffer shape does not match the parameter")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bias1

    for name, value in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        value -= step_size * m / (np.sqrt(v / bias2) + state.eps)
    return state
