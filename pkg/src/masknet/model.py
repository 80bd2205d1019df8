"""Encoder, forget net, predictor and discriminator, wired per training mode.

Modes:

``baseline``
    encoder -> predictor; no forget net, no discriminator.
``multitask``
    the discriminator reads Z directly and its gradient reaches the encoder
    unchanged.
``grl``
    the discriminator reads ``grad_reverse(Z)``; the encoder is pushed to
    hide the nuisance.
``masknet``
    the forget net turns time-pooled Z into a per-channel mask tiled over
    time. The predictor reads ``Z * M``. The discriminator reads
    ``grad_reverse(stop_gradient(Z) * M)``, so its gradient reaches the
    forget net (reversed) and itself, never the encoder.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ContractError, DimensionError, ModeError

MODES = ("baseline", "multitask", "grl", "masknet")


@dataclass(frozen=True)
class BlockSpec:
    num_layers: int = 1
    channels: int = 32
    kernel: int = 5
    stride: int = 1
    repeat: int = 1

    def __post_init__(self):
        if self.num_layers < 1 or self.channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ContractError(f"invalid block {self}")
        if self.repeat < 1:
            raise ContractError(f"block repeat must be >= 1, got {self.repeat}")

    @property
    def residual_active(self):
        return self.num_layers > 1


def _default_blocks():
    return (BlockSpec(1, 32, 5, 2, 1), BlockSpec(2, 32, 5, 1, 1))


@dataclass(frozen=True)
class ModelConfig:
    input_features: int = 20
    encoder_blocks: tuple = field(default_factory=_default_blocks)
    encoder_out_channels: int = 32
    squeeze_ratio: int = 8
    vocab_size: int = 8
    num_nuisance_classes: int = 6
    adversarial_weight: float = 1.0
    mode: str = "masknet"
    seed: int = 0
    detach_forget_input: bool = True
    discriminator_hidden: int = 32
    # "z": forget net reads encoder output; "x": duplicate encoder on raw input
    forget_input: str = "z"
    bn_eps: float = ad.BN_EPS
    bn_momentum: float = ad.BN_MOMENTUM

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.encoder_blocks)
        object.__setattr__(self, "encoder_blocks", blocks)
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.squeeze_ratio < 1:
            raise ContractError("squeeze_ratio must be >= 1")
        if self.encoder_out_channels < 1 or self.vocab_size < 1 or self.input_features < 1:
            raise ContractError("channel counts and vocab_size must be >= 1")
        if not blocks:
            raise ContractError("encoder needs at least one block")
        if blocks[-1].channels != self.encoder_out_channels:
            raise ContractError(
                f"encoder_out_channels={self.encoder_out_channels} but last block has "
                f"{blocks[-1].channels} channels"
            )
        if self.mode != "baseline" and self.num_nuisance_classes < 2:
            raise ContractError("modes with a discriminator need num_nuisance_classes >= 2")
        if self.adversarial_weight < 0:
            raise ContractError("adversarial_weight must be >= 0")
        if self.forget_input not in ("z", "x"):
            raise ContractError(f"forget_input must be 'z' or 'x', got {self.forget_input!r}")

    @property
    def squeezed_width(self):
        return max(1, self.encoder_out_channels // self.squeeze_ratio)

    @property
    def has_discriminator(self):
        return self.mode != "baseline"

    @property
    def has_forget_net(self):
        return self.mode == "masknet"


@dataclass
class ForwardBundle:
    Z: Tensor
    M_vec: Optional[Tensor]
    M: Optional[Tensor]
    Z_tilde: Tensor
    predictor_logprobs: Tensor
    discriminator_logits: Optional[Tensor]
    mode: str


def _init_rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class MaskNet:
    """Parameters, batch-norm state, and forward wiring for one config.

    Parameters are initialised from ``(cfg.seed, parameter name)`` so two
    models built with the same seed share the encoder and predictor
    initialisation regardless of mode.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._encoder_layout = self._build_encoder("encoder")
        if cfg.has_forget_net:
            if cfg.forget_input == "z":
                C, S = cfg.encoder_out_channels, cfg.squeezed_width
                self._linear("forget.squeeze", C, S)
                self._linear("forget.excite", S, C)
            else:
                self._forget_layout = self._build_encoder("forget.encoder")
        V1 = cfg.vocab_size + 1
        self._conv("predictor.conv", cfg.encoder_out_channels, V1, 1, bias=True)
        if cfg.has_discriminator:
            H = cfg.discriminator_hidden
            self._linear("discriminator.fc1", cfg.encoder_out_channels, H)
            self._linear("discriminator.fc2", H, cfg.num_nuisance_classes)

    # ------------------------------------------------------------- building

    def _add(self, name, arr):
        self.params[name] = Tensor(arr.astype(np.float32), requires_grad=True)

    def _conv(self, name, cin, cout, k, bias=False):
        fan_in = cin * k
        rng = _init_rng(self.cfg.seed, name + ".weight")
        self._add(name + ".weight", rng.standard_normal((cout, cin, k)) * np.sqrt(2.0 / fan_in))
        if bias:
            self._add(name + ".bias", np.zeros(cout))

    def _linear(self, name, cin, cout):
        rng = _init_rng(self.cfg.seed, name + ".weight")
        bound = 1.0 / np.sqrt(cin)
        self._add(name + ".weight", rng.uniform(-bound, bound, (cout, cin)))
        self._add(name + ".bias", np.zeros(cout))

    def _bn(self, name, channels):
        self._add(name + ".gamma", np.ones(channels))
        self._add(name + ".beta", np.zeros(channels))
        self.bn[name] = BatchNormState(channels, momentum=self.cfg.bn_momentum, eps=self.cfg.bn_eps)

    def _build_encoder(self, prefix):
        layout = []
        cin = self.cfg.input_features
        for bi, spec in enumerate(self.cfg.encoder_blocks):
            for r in range(spec.repeat):
                name = f"{prefix}.block{bi}.rep{r}"
                layers = []
                c = cin
                for li in range(spec.num_layers):
                    lname = f"{name}.layer{li}"
                    self._conv(lname + ".conv", c, spec.channels, spec.kernel)
                    self._bn(lname + ".bn", spec.channels)
                    layers.append((lname, spec.stride if li == 0 else 1))
                    c = spec.channels
                proj = None
                if spec.residual_active and (cin != spec.channels or spec.stride > 1):
                    proj = name + ".residual"
                    self._conv(proj + ".conv", cin, spec.channels, 1)
                layout.append((bi, name, spec, layers, proj))
                cin = spec.channels
        return layout

    # ---------------------------------------------------------- bookkeeping

    def named_parameters(self, prefix=""):
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def parameter_count(self, prefix=""):
        return int(sum(t.data.size for t in self.named_parameters(prefix).values()))

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype):
        """Cast parameters and running moments in place (float64 for oracles)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        for s in self.bn.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return self

    def output_length(self, T):
        for bi, _name, spec, _layers, _proj in self._encoder_layout:
            T = ad.conv1d_output_length(T, spec.kernel, spec.stride, spec.kernel // 2)
            if T < 1:
                raise DimensionError(f"encoder block {bi}: output length {T} < 1")
        return T

    # --------------------------------------------------------------- forward

    def _run_encoder(self, layout, X, training):
        h = X
        for bi, name, spec, layers, proj in layout:
            T_in = h.shape[2]
            if ad.conv1d_output_length(T_in, spec.kernel, spec.stride, spec.kernel // 2) < 1:
                raise DimensionError(f"encoder block {bi} ({name}): input length {T_in} too short")
            x_in = h
            for lname, stride in layers:
                p = self.params
                h = ad.conv1d(h, p[lname + ".conv.weight"], stride=stride, padding=spec.kernel // 2)
                h = ad.batchnorm1d(h, p[lname + ".bn.gamma"], p[lname + ".bn.beta"], self.bn[lname + ".bn"], training)
                h = ad.relu(h)
            if spec.residual_active:
                if proj is not None:
                    shortcut = ad.conv1d(x_in, self.params[proj + ".conv.weight"], stride=spec.stride)
                else:
                    shortcut = x_in
                h = ad.add(h, shortcut)
        return h

    def encoder_forward(self, X, training=True):
        if X.data.ndim != 3 or X.shape[1] != self.cfg.input_features:
            raise DimensionError(f"encoder: expected [B, {self.cfg.input_features}, T], got {X.shape}")
        return self._run_encoder(self._encoder_layout, X, training)

    def forget_net_forward(self, Z_in):
        """Pool over time, squeeze, ReLU, excite, sigmoid, tile. Returns (M_vec, M)."""
        p = self.params
        pooled = ad.mean_over_time(Z_in)
        h = ad.relu(ad.linear(pooled, p["forget.squeeze.weight"], p["forget.squeeze.bias"]))
        M_vec = ad.sigmoid(ad.linear(h, p["forget.excite.weight"], p["forget.excite.bias"]))
        return M_vec, ad.tile_over_time(M_vec, Z_in.shape[2])

    def predictor_forward(self, Z_tilde):
        p = self.params
        logits = ad.conv1d(Z_tilde, p["predictor.conv.weight"], p["predictor.conv.bias"])
        return ad.log_softmax(ad.transpose(logits, (0, 2, 1)))

    def discriminator_forward(self, features):
        if not self.cfg.has_discriminator:
            raise ModeError("discriminator called in baseline mode")
        p = self.params
        h = ad.mean_over_time(features)
        h = ad.relu(ad.linear(h, p["discriminator.fc1.weight"], p["discriminator.fc1.bias"]))
        return ad.linear(h, p["discriminator.fc2.weight"], p["discriminator.fc2.bias"])

    def forward(self, X, training=True):
        cfg = self.cfg
        Z = self.encoder_forward(X, training)
        M_vec = M = D_logits = None
        mode = cfg.mode
        if mode == "baseline":
            Z_tilde = Z
        elif mode == "multitask":
            Z_tilde = Z
            D_logits = self.discriminator_forward(Z)
        elif mode == "grl":
            Z_tilde = Z
            D_logits = self.discriminator_forward(ad.grad_reverse(Z, cfg.adversarial_weight))
        else:
            Z_const = ad.stop_gradient(Z)
            if cfg.forget_input == "x":
                M = ad.sigmoid(self._run_encoder(self._forget_layout, X, training))
                M_adv = M
            elif cfg.detach_forget_input:
                M_vec, M = self.forget_net_forward(Z_const)
                M_adv = M
            else:
                # looser reading: task gradients may reach E through F's input,
                # the adversary still may not
                M_vec, M = self.forget_net_forward(Z)
                _, M_adv = self.forget_net_forward(Z_const)
            Z_tilde = apply_mask(Z, M)
            D_in = ad.grad_reverse(apply_mask(Z_const, M_adv), cfg.adversarial_weight)
            D_logits = self.discriminator_forward(D_in)
        logprobs = self.predictor_forward(Z_tilde)
        return ForwardBundle(Z, M_vec, M, Z_tilde, logprobs, D_logits, mode)


def apply_mask(Z, M):
    """Elementwise ``Z * M``."""
    return ad.mul(Z, M)
