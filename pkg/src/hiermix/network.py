"""Sequence-to-sequence forecaster with a Poisson mixture output head.

The encoder runs once over the whole history: a dilated causal convolution
stack per bottom series (parameters shared across series), a second stack
over shared covariates, dense embeddings of static features, and a local
dense layer over the known-future window.  Decoders then "fork" from any
number of creation dates along that one encoding: per-date contexts feed a
rate decoder (parameters shared across series and horizon steps, softplus
output) and a weight decoder (softmax output), giving one full mixture
parameterization per creation date.

Static identifiers enter as one-hot blocks; the static dense layer turns
them into learned embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_components: int = 4
    conv_filters: int = 8
    conv_layers: int = 2
    kernel_width: int = 7
    dilations: tuple = (1, 7)
    static_width: int = 4
    future_width: int = 4
    context_agg: int = 16
    context_spec: int = 16
    decoder_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.conv_layers < 1:
            raise ValueError("need at least one convolution layer")
        if len(self.dilations) != self.conv_layers:
            raise ValueError(
                f"{len(self.dilations)} dilations for {self.conv_layers} conv layers"
            )
        for name in ("n_components", "conv_filters", "kernel_width", "static_width",
                     "future_width", "context_agg", "context_spec", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class PoissonMixtureNet:
    """Forecaster bound to one feature layout and horizon.

    Parameters live in ``self.params`` (name -> Tensor with
    ``requires_grad=True``), created in a fixed order from ``seed`` so runs
    are reproducible checkpoint-for-checkpoint.
    """

    def __init__(self, config: ModelConfig, feature_dims, horizon: int, seed: int = 0):
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.config = config
        self.dims = feature_dims
        self.horizon = int(horizon)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape: tuple, fan_in: int, fan_out: int) -> None:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self.params[name] = Tensor(self._rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def _bias(self, name: str, width: int) -> None:
        self.params[name] = Tensor(np.zeros(width), requires_grad=True)

    def _build_conv(self, prefix: str, c_in: int) -> None:
        cfg = self.config
        for layer in range(cfg.conv_layers):
            ci = c_in if layer == 0 else cfg.conv_filters
            self._param(
                f"{prefix}.{layer}.w",
                (cfg.conv_filters, ci, cfg.kernel_width),
                ci * cfg.kernel_width,
                cfg.conv_filters,
            )
            self._bias(f"{prefix}.{layer}.b", cfg.conv_filters)

    def _build_mlp(self, prefix: str, n_in: int, n_out: int) -> None:
        hidden = self.config.decoder_hidden
        self._param(f"{prefix}.w1", (n_in, hidden), n_in, hidden)
        self._bias(f"{prefix}.b1", hidden)
        self._param(f"{prefix}.w2", (hidden, n_out), hidden, n_out)
        self._bias(f"{prefix}.b2", n_out)

    def _build(self) -> None:
        cfg, dims, h = self.config, self.dims, self.horizon
        if dims.hist_bottom > 0:
            self._build_conv("conv_bottom", dims.hist_bottom)
        if dims.hist_shared > 0:
            self._build_conv("conv_shared", dims.hist_shared)
        if dims.hist_bottom == 0 and dims.hist_shared == 0:
            raise ValueError("need at least one historical feature block")
        if dims.static_bottom > 0:
            self._param("static_bottom.w", (dims.static_bottom, cfg.static_width), dims.static_bottom, cfg.static_width)
            self._bias("static_bottom.b", cfg.static_width)
        if dims.static_shared > 0:
            self._param("static_shared.w", (dims.static_shared, cfg.static_width), dims.static_shared, cfg.static_width)
            self._bias("static_shared.b", cfg.static_width)
        fut_total = dims.fut_bottom + dims.fut_shared
        if fut_total > 0:
            self._param("future_enc.w", (fut_total * h, cfg.future_width), fut_total * h, cfg.future_width)
            self._bias("future_enc.b", cfg.future_width)
        self._d1 = (
            (cfg.conv_filters if dims.hist_bottom else 0)
            + (cfg.conv_filters if dims.hist_shared else 0)
            + (cfg.static_width if dims.static_bottom else 0)
            + (cfg.static_width if dims.static_shared else 0)
            + (cfg.future_width if fut_total else 0)
        )
        self._d2 = (cfg.conv_filters if dims.hist_shared else 0) + (
            cfg.static_width if dims.static_shared else 0
        )
        if self._d2 == 0:
            # Weight decoder must see something; fall back to the bottom conv block.
            self._d2 = cfg.conv_filters
        self._build_mlp("ctx_agg1", self._d1, cfg.context_agg)
        self._build_mlp("ctx_agg2", self._d2, cfg.context_agg)
        self._build_mlp("ctx_spec", self._d1, cfg.context_spec * h)
        self._build_mlp("rate_dec", cfg.context_agg + cfg.context_spec + fut_total, cfg.n_components)
        self._build_mlp("weight_dec", cfg.context_agg, cfg.n_components)

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ValueError(f"parameter '{name}' has shape {p.values.shape}, file has {arr.shape}")
            p.values[...] = arr

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = ag.add_bias(x @ p[f"{prefix}.w1"], p[f"{prefix}.b1"]).relu()
        return ag.add_bias(hidden @ p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _conv_stack(self, prefix: str, x) -> Tensor:
        out = ag.as_tensor(x)
        for layer in range(self.config.conv_layers):
            out = ag.dilated_conv1d(
                out,
                self.params[f"{prefix}.{layer}.w"],
                self.params[f"{prefix}.{layer}.b"],
                dilation=self.config.dilations[layer],
            ).relu()
        return out

    def encode_sequence(self, fb):
        """Run every encoder once over the full history.

        Returns (conv_bottom, conv_shared, static_bottom, static_shared)
        where conv outputs cover all of time and entries are None for
        zero-width feature blocks.
        """
        dims = self.dims
        conv_bottom = None
        if dims.hist_bottom > 0:
            per_series = [self._conv_stack("conv_bottom", fb.hist_bottom[b]) for b in range(fb.n_series)]
            conv_bottom = ag.stack_rows(per_series)  # (n_b, filters, t)
        conv_shared = self._conv_stack("conv_shared", fb.hist_shared) if dims.hist_shared > 0 else None
        static_bottom = None
        if dims.static_bottom > 0:
            static_bottom = ag.add_bias(
                Tensor(fb.static_bottom) @ self.params["static_bottom.w"], self.params["static_bottom.b"]
            ).relu()
        static_shared = None
        if dims.static_shared > 0:
            static_shared = ag.add_bias(
                Tensor(fb.static_shared.reshape(1, -1)) @ self.params["static_shared.w"],
                self.params["static_shared.b"],
            ).relu()
        return conv_bottom, conv_shared, static_bottom, static_shared

    def _future_windows(self, fb, dates: np.ndarray) -> np.ndarray | None:
        """Known-future features per (date, series), flattened over the window."""
        h = self.horizon
        total = self.dims.fut_bottom + self.dims.fut_shared
        if total == 0:
            return None
        rows = []
        for t in dates:
            window = np.concatenate(
                [
                    fb.fut_bottom[:, :, t + 1 : t + 1 + h].reshape(fb.n_series, -1),
                    np.broadcast_to(
                        fb.fut_shared[None, :, t + 1 : t + 1 + h], (fb.n_series, self.dims.fut_shared, h)
                    ).reshape(fb.n_series, -1),
                ],
                axis=1,
            )
            rows.append(window)
        return np.concatenate(rows, axis=0)  # (n_dates * n_b, total * h)

    def _future_steps(self, fb, dates: np.ndarray) -> np.ndarray | None:
        """Known-future features per (date, series, step) for the rate decoder."""
        h = self.horizon
        total = self.dims.fut_bottom + self.dims.fut_shared
        if total == 0:
            return None
        rows = []
        for t in dates:
            block = np.concatenate(
                [
                    fb.fut_bottom[:, :, t + 1 : t + 1 + h],
                    np.broadcast_to(
                        fb.fut_shared[None, :, t + 1 : t + 1 + h], (fb.n_series, self.dims.fut_shared, h)
                    ),
                ],
                axis=1,
            )  # (n_b, total, h)
            rows.append(block.transpose(0, 2, 1).reshape(fb.n_series * h, total))
        return np.concatenate(rows, axis=0)  # (n_dates * n_b * h, total)

    def forward_stacked(self, fb, creation_indices):
        """Rates and weights for every creation date in one graph.

        Args:
            fb: feature bundle whose history covers ``max(creation_indices)``
                and whose future block covers ``max(...) + horizon``.
            creation_indices: forecast creation dates (time indices).

        Returns:
            (rates, weights) Tensors of shapes
            (n_dates, n_series, n_components, horizon) and (n_dates, n_components).
        """
        dates = np.asarray(creation_indices, dtype=np.intp)
        if dates.ndim != 1 or dates.size == 0:
            raise ValueError("need a non-empty 1-d list of creation dates")
        t_hist = fb.hist_shared.shape[1] if self.dims.hist_shared else fb.hist_bottom.shape[2]
        if dates.min() < 0 or dates.max() >= t_hist:
            raise ValueError(f"creation dates must lie in [0, {t_hist}), got {dates.min()}..{dates.max()}")
        n_b, h, d = fb.n_series, self.horizon, dates.size
        conv_bottom, conv_shared, static_bottom, static_shared = self.encode_sequence(fb)

        blocks1 = []
        if conv_bottom is not None:
            hb = conv_bottom.take(dates, axis=2).transpose((2, 0, 1))  # (d, n_b, filters)
            blocks1.append(hb.reshape((d * n_b, self.config.conv_filters)))
        hs_rows = None
        if conv_shared is not None:
            hs_rows = conv_shared.take(dates, axis=1).transpose((1, 0))  # (d, filters)
            blocks1.append(hs_rows.repeat(n_b, axis=0))
        if static_bottom is not None:
            blocks1.append(static_bottom.tile_rows(d))
        if static_shared is not None:
            blocks1.append(static_shared.tile_rows(d * n_b))
        fut_win = self._future_windows(fb, dates)
        if fut_win is not None:
            enc = ag.add_bias(Tensor(fut_win) @ self.params["future_enc.w"], self.params["future_enc.b"]).relu()
            blocks1.append(enc)
        h1 = ag.concat(blocks1, axis=1)  # (d * n_b, d1)

        blocks2 = []
        if hs_rows is not None:
            blocks2.append(hs_rows)
        if static_shared is not None:
            blocks2.append(static_shared.tile_rows(d))
        if not blocks2:
            blocks2.append(conv_bottom.take(dates, axis=2).mean(axis=0).transpose((1, 0)))
        h2 = ag.concat(blocks2, axis=1)  # (d, d2)

        ctx1 = self._mlp("ctx_agg1", h1)  # (d * n_b, agg)
        spec = self._mlp("ctx_spec", h1).reshape((d * n_b, h, self.config.context_spec))
        fut_steps = self._future_steps(fb, dates)
        rates = self._rates_from_contexts(ctx1, spec, fut_steps).reshape(
            (d, n_b, self.config.n_components, h)
        )
        ctx2 = self._mlp("ctx_agg2", h2)  # (d, agg)
        weights = self._weights_from_context(ctx2)  # (d, k)
        return rates, weights

    def _rates_from_contexts(self, ctx1: Tensor, spec: Tensor, fut_steps) -> Tensor:
        """Decode rates from per-row contexts.

        Args:
            ctx1: (rows, context_agg) aggregate context per (date, series).
            spec: (rows, horizon, context_spec) step-specific contexts.
            fut_steps: optional (rows * horizon, fut features) array.

        Returns:
            Tensor (rows, n_components, horizon); the decoder itself is one
            dense stack shared across rows and steps.
        """
        rows, h = ctx1.shape[0], self.horizon
        parts = [
            ctx1.reshape((rows, 1, self.config.context_agg)).repeat(h, axis=1).reshape((rows * h, self.config.context_agg)),
            spec.reshape((rows * h, self.config.context_spec)),
        ]
        if fut_steps is not None:
            parts.append(ag.as_tensor(fut_steps))
        z = self._mlp("rate_dec", ag.concat(parts, axis=1))  # (rows * h, k)
        return z.softplus().reshape((rows, h, self.config.n_components)).transpose((0, 2, 1))

    def _weights_from_context(self, ctx2: Tensor) -> Tensor:
        return self._mlp("weight_dec", ctx2).softmax(axis=1)

    def encode(self, fb, t: int):
        """Per-series and shared embeddings at one creation date.

        Returns (h1, h2): h1 is (n_series, d1) with blocks ordered
        [bottom conv | shared conv | bottom static | shared static |
        future encoding]; h2 is the shared-only (d2,) vector.
        """
        rates_ctx = self._contexts_at(fb, int(t))
        return rates_ctx[0], rates_ctx[1]

    def _contexts_at(self, fb, t: int):
        dates = np.asarray([t], dtype=np.intp)
        n_b = fb.n_series
        conv_bottom, conv_shared, static_bottom, static_shared = self.encode_sequence(fb)
        blocks1 = []
        if conv_bottom is not None:
            blocks1.append(conv_bottom.take(dates, axis=2).transpose((2, 0, 1)).reshape((n_b, self.config.conv_filters)))
        hs = None
        if conv_shared is not None:
            hs = conv_shared.take(dates, axis=1).transpose((1, 0))  # (1, filters)
            blocks1.append(hs.tile_rows(n_b))
        if static_bottom is not None:
            blocks1.append(static_bottom)
        if static_shared is not None:
            blocks1.append(static_shared.tile_rows(n_b))
        fut_win = self._future_windows(fb, dates)
        if fut_win is not None:
            blocks1.append(
                ag.add_bias(Tensor(fut_win) @ self.params["future_enc.w"], self.params["future_enc.b"]).relu()
            )
        h1 = ag.concat(blocks1, axis=1)
        blocks2 = []
        if hs is not None:
            blocks2.append(hs)
        if static_shared is not None:
            blocks2.append(static_shared)
        if not blocks2:
            blocks2.append(conv_bottom.take(dates, axis=2).mean(axis=0).transpose((1, 0)))
        h2 = ag.concat(blocks2, axis=1).reshape((-1,))
        return h1, h2

    def decode(self, h1: Tensor, h2: Tensor, fut_steps=None):
        """Mixture parameters from one creation date's embeddings.

        Args:
            h1: (n_series, d1) per-series embedding.
            h2: (d2,) shared embedding.
            fut_steps: optional (n_series * horizon, fut features) array of
                known-future covariates for the decoded window.

        Returns:
            (rates, weights) Tensors of shapes (n_series, n_components,
            horizon) and (n_components,).
        """
        ctx1 = self._mlp("ctx_agg1", h1)
        spec = self._mlp("ctx_spec", h1).reshape((h1.shape[0], self.horizon, self.config.context_spec))
        rates = self._rates_from_contexts(ctx1, spec, fut_steps)
        ctx2 = self._mlp("ctx_agg2", h2.reshape((1, -1)))
        weights = self._weights_from_context(ctx2).reshape((-1,))
        return rates, weights

    def forward(self, fb, t: int):
        """Mixture parameters for the window starting after date ``t``."""
        rates, weights = self.forward_stacked(fb, [int(t)])
        n_b = fb.n_series
        return (
            rates.reshape((n_b, self.config.n_components, self.horizon)),
            weights.reshape((self.config.n_components,)),
        )

    def forward_forked(self, fb, creation_indices):
        """One (rates, weights) Tensor pair per creation date, one encoder pass."""
        rates, weights = self.forward_stacked(fb, creation_indices)
        out = []
        for i in range(len(creation_indices)):
            out.append((rates[i], weights[i]))
        return out
