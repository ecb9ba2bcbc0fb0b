"""Forecasting model zoo behind one parameter-vector interface.

Every model first collapses the (L, d) window to a scalar series via a
learned input mix, then applies its own mapping to an H-step forecast:

* dlinear    -- explicit linear trend plus a truncated Fourier seasonal
               sum evaluated at the forecast steps, anchored to the
               window's last mixed value.
* paifilter  -- learnable static complex kernel applied to the window
               spectrum, inverse-transformed, affine head.
* texfilter  -- spectrum-conditioned kernel produced by a one-hidden-
               layer complex network (modReLU hidden activation).
* frets      -- separate real networks for the real and imaginary parts
               of the spectrum, recombined before the inverse transform.

The inverse transform keeps the real part only: learned kernels are not
conjugate-symmetric, so their filtered spectra are projected back onto
real signals. Backward passes are hand-derived and are checked against
central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import numerics
from .errors import (
    ContractViolation,
    MergeIncompatibilityError,
    NumericInputError,
    ShapeMismatchError,
)
from .numerics import ParamVector, layout_from_lengths

MODEL_KINDS = ("dlinear", "paifilter", "texfilter", "frets")

# Described by the source material but deliberately not implemented;
# validation errors mention them by name.
OUT_OF_SCOPE_KINDS = ("transformer", "timesnet", "patchtst")

_GATE_EPS = 1e-12


def _check_batch(inputs, targets, lookback, horizon, n_features):
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[1:] != (lookback, n_features):
        raise ShapeMismatchError(
            f"batch inputs must be (N, {lookback}, {n_features}), got {inputs.shape}"
        )
    if targets.shape != (inputs.shape[0], horizon):
        raise ShapeMismatchError(
            f"batch targets must be (N, {horizon}), got {targets.shape}"
        )
    if inputs.shape[0] == 0:
        raise ContractViolation("batch must be non-empty")
    return inputs, targets


class ForecastModel:
    """Shared plumbing: parameter storage, loss, import/export."""

    kind = "abstract"

    def __init__(self, lookback: int, horizon: int, n_features: int,
                 hyper: dict, values: np.ndarray):
        self.lookback = int(lookback)
        self.horizon = int(horizon)
        self.n_features = int(n_features)
        self.hyper = dict(hyper)
        layout = self.layout(lookback, horizon, n_features, self.hyper)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        total = sum(seg.length for seg in layout)
        if values.size != total:
            raise MergeIncompatibilityError(
                f"{self.kind}: expected {total} parameters, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericInputError(f"{self.kind}: non-finite parameters")
        values = values.copy()
        values.flags.writeable = False
        self._values = values
        self._layout = layout
        self._views = {
            seg.name: values[seg.offset : seg.offset + seg.length] for seg in layout
        }
        self._bind_views()

    # -- subclass hooks ----------------------------------------------------
    @classmethod
    def layout(cls, lookback, horizon, n_features, hyper):
        raise NotImplementedError

    @classmethod
    def default_hyper(cls, lookback, horizon, n_features):
        return {}

    @classmethod
    def init_values(cls, lookback, horizon, n_features, hyper, rng):
        raise NotImplementedError

    def _bind_views(self):
        """Cache reshaped views of the flat parameter vector."""

    def predict_batch(self, inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _backward(self, inputs, dpred, cache) -> ParamVector:
        raise NotImplementedError

    # -- shared behaviour --------------------------------------------------
    @property
    def n_params(self) -> int:
        return self._values.size

    def predict(self, window) -> np.ndarray:
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (self.lookback, self.n_features):
            raise ShapeMismatchError(
                f"window must be ({self.lookback}, {self.n_features}), got {window.shape}"
            )
        if not np.all(np.isfinite(window)):
            raise NumericInputError("window contains non-finite values")
        return self.predict_batch(window[None])[0]

    def loss(self, inputs, targets) -> float:
        inputs, targets = _check_batch(
            inputs, targets, self.lookback, self.horizon, self.n_features
        )
        pred = self.predict_batch(inputs)
        return float(np.mean((pred - targets) ** 2))

    def export_params(self) -> ParamVector:
        return ParamVector(self._values, self._layout)

    def import_params(self, pvec: ParamVector) -> "ForecastModel":
        if pvec.layout != self._layout:
            raise MergeIncompatibilityError(
                f"{self.kind}: incoming layout does not match model layout"
            )
        return type(self)(
            self.lookback, self.horizon, self.n_features, self.hyper, pvec.values
        )

    def loss_and_gradient(self, inputs, targets) -> tuple[float, ParamVector]:
        """Batch MSE and its gradient from a single forward pass."""
        inputs, targets = _check_batch(
            inputs, targets, self.lookback, self.horizon, self.n_features
        )
        pred, cache = self._forward(inputs)
        loss_val = float(np.mean((pred - targets) ** 2))
        dpred = (2.0 / pred.size) * (pred - targets)
        return loss_val, self._backward(inputs, dpred, cache)

    def loss_gradient(self, inputs, targets) -> ParamVector:
        return self.loss_and_gradient(inputs, targets)[1]

    def _grad_vector(self, parts: dict[str, np.ndarray]) -> ParamVector:
        flat = np.empty(self.n_params)
        for seg in self._layout:
            flat[seg.offset : seg.offset + seg.length] = parts[seg.name].reshape(-1)
        return ParamVector(flat, self._layout)


def _mix_forward(inputs, mix):
    return inputs @ mix  # (N, L)


def _mix_backward(inputs, dz):
    return np.einsum("nld,nl->d", inputs, dz)


def _head_forward(series, w, b):
    return series @ w.T + b


def _head_backward(series, dpred, w):
    dw = dpred.T @ series
    db = dpred.sum(axis=0)
    dseries = dpred @ w
    return dw, db, dseries


def _affine_bound(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


# ---------------------------------------------------------------------------
# dlinear
# ---------------------------------------------------------------------------

class DLinearModel(ForecastModel):
    """Trend + Fourier seasonal curve over forecast steps, plus anchor.

    The trend slope acts on time measured in lookback units (t/L); the
    raw step index would put the slope's curvature two orders of
    magnitude above every other coordinate and destabilize SGD at the
    shared learning rate. Harmonics stay on raw steps so the seasonal
    period is expressed in rows.
    """

    kind = "dlinear"

    @classmethod
    def default_hyper(cls, lookback, horizon, n_features):
        return {"harmonics": 3, "period": float(lookback), "use_anchor": True}

    @classmethod
    def layout(cls, lookback, horizon, n_features, hyper):
        k = hyper["harmonics"]
        return layout_from_lengths([
            ("trend", 2),
            ("seasonal_cos", k),
            ("seasonal_sin", k),
            ("input_mix", n_features),
        ])

    @classmethod
    def init_values(cls, lookback, horizon, n_features, hyper, rng):
        k = hyper["harmonics"]
        fan = 2 + 2 * k + n_features
        bound = _affine_bound(fan)
        return rng.uniform(-bound, bound, size=2 + 2 * k + n_features)

    def _bind_views(self):
        k = self.hyper["harmonics"]
        period = self.hyper["period"]
        self.trend = self._views["trend"]
        self.seasonal_cos = self._views["seasonal_cos"]
        self.seasonal_sin = self._views["seasonal_sin"]
        self.input_mix = self._views["input_mix"]
        # forecast step h (0-based) sits at window-relative time t = L + h
        t = self.lookback + np.arange(self.horizon, dtype=np.float64)
        harm = np.arange(1, k + 1, dtype=np.float64)
        angles = 2.0 * np.pi * np.outer(t, harm) / period  # (H, k)
        self._basis = np.concatenate(
            [
                np.column_stack([t / self.lookback, np.ones_like(t)]),
                np.cos(angles),
                np.sin(angles),
            ],
            axis=1,
        )  # (H, 2 + 2k)

    def _forward(self, inputs):
        coef = np.concatenate([self.trend, self.seasonal_cos, self.seasonal_sin])
        curve = self._basis @ coef  # (H,)
        if self.hyper["use_anchor"]:
            z_last = inputs[:, -1, :] @ self.input_mix  # (N,)
            pred = curve[None, :] + z_last[:, None]
        else:
            pred = np.broadcast_to(curve, (inputs.shape[0], self.horizon)).copy()
        return pred, None

    def predict_batch(self, inputs):
        return self._forward(np.asarray(inputs, dtype=np.float64))[0]

    def _backward(self, inputs, dpred, cache):
        dcoef = self._basis.T @ dpred.sum(axis=0)
        k = self.hyper["harmonics"]
        if self.hyper["use_anchor"]:
            dz_last = dpred.sum(axis=1)  # (N,)
            dmix = inputs[:, -1, :].T @ dz_last
        else:
            dmix = np.zeros(self.n_features)
        return self._grad_vector({
            "trend": dcoef[:2],
            "seasonal_cos": dcoef[2 : 2 + k],
            "seasonal_sin": dcoef[2 + k :],
            "input_mix": dmix,
        })


# ---------------------------------------------------------------------------
# paifilter
# ---------------------------------------------------------------------------

class PaiFilterModel(ForecastModel):
    """Static learnable complex kernel on the window spectrum."""

    kind = "paifilter"

    @classmethod
    def layout(cls, lookback, horizon, n_features, hyper):
        return layout_from_lengths([
            ("kernel_re", lookback),
            ("kernel_im", lookback),
            ("head_weight", horizon * lookback),
            ("head_bias", horizon),
            ("input_mix", n_features),
        ])

    @classmethod
    def init_values(cls, lookback, horizon, n_features, hyper, rng):
        kernel_re = 1.0 + 0.01 * rng.standard_normal(lookback)
        kernel_im = 0.01 * rng.standard_normal(lookback)
        hb = _affine_bound(lookback)
        head_w = rng.uniform(-hb, hb, size=horizon * lookback)
        head_b = rng.uniform(-hb, hb, size=horizon)
        mb = _affine_bound(n_features)
        mix = rng.uniform(-mb, mb, size=n_features)
        return np.concatenate([kernel_re, kernel_im, head_w, head_b, mix])

    def _bind_views(self):
        L, H = self.lookback, self.horizon
        self.kernel_re = self._views["kernel_re"]
        self.kernel_im = self._views["kernel_im"]
        self.head_w = self._views["head_weight"].reshape(H, L)
        self.head_b = self._views["head_bias"]
        self.input_mix = self._views["input_mix"]

    def filter_series(self, z: np.ndarray) -> np.ndarray:
        """Apply the kernel to (N, L) scalar series; the pre-head signal."""
        s_re, s_im = numerics.dft_batch(z)
        f_re = s_re * self.kernel_re - s_im * self.kernel_im
        f_im = s_re * self.kernel_im + s_im * self.kernel_re
        return numerics.real_idft_batch(f_re, f_im)

    def _forward(self, inputs):
        z = _mix_forward(inputs, self.input_mix)
        s_re, s_im = numerics.dft_batch(z)
        f_re = s_re * self.kernel_re - s_im * self.kernel_im
        f_im = s_re * self.kernel_im + s_im * self.kernel_re
        filtered = numerics.real_idft_batch(f_re, f_im)
        pred = _head_forward(filtered, self.head_w, self.head_b)
        return pred, (z, s_re, s_im, filtered)

    def predict_batch(self, inputs):
        return self._forward(np.asarray(inputs, dtype=np.float64))[0]

    def _backward(self, inputs, dpred, cache):
        _, s_re, s_im, filtered = cache
        dhead_w, dhead_b, dfiltered = _head_backward(filtered, dpred, self.head_w)
        df_re, df_im = numerics.real_idft_batch_adjoint(dfiltered)
        dk_re = (df_re * s_re + df_im * s_im).sum(axis=0)
        dk_im = (-df_re * s_im + df_im * s_re).sum(axis=0)
        ds_re = df_re * self.kernel_re + df_im * self.kernel_im
        ds_im = -df_re * self.kernel_im + df_im * self.kernel_re
        dz = numerics.dft_batch_adjoint(ds_re, ds_im)
        return self._grad_vector({
            "kernel_re": dk_re,
            "kernel_im": dk_im,
            "head_weight": dhead_w,
            "head_bias": dhead_b,
            "input_mix": _mix_backward(inputs, dz),
        })


# ---------------------------------------------------------------------------
# texfilter
# ---------------------------------------------------------------------------

class TexFilterModel(ForecastModel):
    """Spectrum-conditioned kernel from a complex one-hidden-layer net.

    The kernel-producing output layer starts at the identity filter
    (bias re=1) with 0.01-scale weights so the untrained filter is
    near-pass-through; the hidden affine uses the standard fan-in rule.
    """

    kind = "texfilter"

    @classmethod
    def default_hyper(cls, lookback, horizon, n_features):
        return {"hidden": lookback}

    @classmethod
    def layout(cls, lookback, horizon, n_features, hyper):
        m = hyper["hidden"]
        L = lookback
        return layout_from_lengths([
            ("filter_w1_re", m * L),
            ("filter_w1_im", m * L),
            ("filter_b1_re", m),
            ("filter_b1_im", m),
            ("filter_gate_bias", m),
            ("filter_w2_re", L * m),
            ("filter_w2_im", L * m),
            ("filter_b2_re", L),
            ("filter_b2_im", L),
            ("head_weight", horizon * L),
            ("head_bias", horizon),
            ("input_mix", n_features),
        ])

    @classmethod
    def init_values(cls, lookback, horizon, n_features, hyper, rng):
        m, L, H = hyper["hidden"], lookback, horizon
        b1 = _affine_bound(L)
        w1_re = rng.uniform(-b1, b1, size=m * L)
        w1_im = rng.uniform(-b1, b1, size=m * L)
        b1_re = rng.uniform(-b1, b1, size=m)
        b1_im = rng.uniform(-b1, b1, size=m)
        gate = 0.01 * rng.standard_normal(m)
        w2_re = 0.01 * rng.standard_normal(L * m)
        w2_im = 0.01 * rng.standard_normal(L * m)
        b2_re = 1.0 + 0.01 * rng.standard_normal(L)
        b2_im = 0.01 * rng.standard_normal(L)
        hb = _affine_bound(L)
        head_w = rng.uniform(-hb, hb, size=H * L)
        head_b = rng.uniform(-hb, hb, size=H)
        mb = _affine_bound(n_features)
        mix = rng.uniform(-mb, mb, size=n_features)
        return np.concatenate([
            w1_re, w1_im, b1_re, b1_im, gate,
            w2_re, w2_im, b2_re, b2_im, head_w, head_b, mix,
        ])

    def _bind_views(self):
        m, L, H = self.hyper["hidden"], self.lookback, self.horizon
        v = self._views
        self.w1_re = v["filter_w1_re"].reshape(m, L)
        self.w1_im = v["filter_w1_im"].reshape(m, L)
        self.b1_re = v["filter_b1_re"]
        self.b1_im = v["filter_b1_im"]
        self.gate_bias = v["filter_gate_bias"]
        self.w2_re = v["filter_w2_re"].reshape(L, m)
        self.w2_im = v["filter_w2_im"].reshape(L, m)
        self.b2_re = v["filter_b2_re"]
        self.b2_im = v["filter_b2_im"]
        self.head_w = v["head_weight"].reshape(H, L)
        self.head_b = v["head_bias"]
        self.input_mix = v["input_mix"]

    def _forward(self, inputs):
        z = _mix_forward(inputs, self.input_mix)
        s_re, s_im = numerics.dft_batch(z)
        u_re = s_re @ self.w1_re.T - s_im @ self.w1_im.T + self.b1_re
        u_im = s_re @ self.w1_im.T + s_im @ self.w1_re.T + self.b1_im
        r = np.sqrt(u_re * u_re + u_im * u_im)
        r_safe = np.maximum(r, _GATE_EPS)
        active = (r + self.gate_bias) > 0.0
        scale = np.where(active, (r + self.gate_bias) / r_safe, 0.0)
        a_re = scale * u_re
        a_im = scale * u_im
        g_re = a_re @ self.w2_re.T - a_im @ self.w2_im.T + self.b2_re
        g_im = a_re @ self.w2_im.T + a_im @ self.w2_re.T + self.b2_im
        f_re = s_re * g_re - s_im * g_im
        f_im = s_re * g_im + s_im * g_re
        filtered = numerics.real_idft_batch(f_re, f_im)
        pred = _head_forward(filtered, self.head_w, self.head_b)
        cache = (s_re, s_im, u_re, u_im, r_safe, active, scale,
                 a_re, a_im, g_re, g_im, filtered)
        return pred, cache

    def predict_batch(self, inputs):
        return self._forward(np.asarray(inputs, dtype=np.float64))[0]

    def _backward(self, inputs, dpred, cache):
        (s_re, s_im, u_re, u_im, r_safe, active, scale,
         a_re, a_im, g_re, g_im, filtered) = cache

        dhead_w, dhead_b, dfiltered = _head_backward(filtered, dpred, self.head_w)
        df_re, df_im = numerics.real_idft_batch_adjoint(dfiltered)

        ds_re = df_re * g_re + df_im * g_im
        ds_im = -df_re * g_im + df_im * g_re
        dg_re = df_re * s_re + df_im * s_im
        dg_im = -df_re * s_im + df_im * s_re

        dw2_re = dg_re.T @ a_re + dg_im.T @ a_im
        dw2_im = -dg_re.T @ a_im + dg_im.T @ a_re
        db2_re = dg_re.sum(axis=0)
        db2_im = dg_im.sum(axis=0)
        da_re = dg_re @ self.w2_re + dg_im @ self.w2_im
        da_im = -dg_re @ self.w2_im + dg_im @ self.w2_re

        # modReLU: a = scale(r) * u with scale = (r + c)/r, d scale/dr = -c/r^2
        inner = da_re * u_re + da_im * u_im
        dscale_dr = np.where(active, -self.gate_bias / (r_safe * r_safe), 0.0)
        radial = dscale_dr * inner / r_safe
        p = np.where(active, scale, 0.0)
        du_re = p * da_re + radial * u_re
        du_im = p * da_im + radial * u_im
        dgate = np.where(active, inner / r_safe, 0.0).sum(axis=0)

        dw1_re = du_re.T @ s_re + du_im.T @ s_im
        dw1_im = -du_re.T @ s_im + du_im.T @ s_re
        db1_re = du_re.sum(axis=0)
        db1_im = du_im.sum(axis=0)
        ds_re += du_re @ self.w1_re + du_im @ self.w1_im
        ds_im += -du_re @ self.w1_im + du_im @ self.w1_re

        dz = numerics.dft_batch_adjoint(ds_re, ds_im)
        return self._grad_vector({
            "filter_w1_re": dw1_re,
            "filter_w1_im": dw1_im,
            "filter_b1_re": db1_re,
            "filter_b1_im": db1_im,
            "filter_gate_bias": dgate,
            "filter_w2_re": dw2_re,
            "filter_w2_im": dw2_im,
            "filter_b2_re": db2_re,
            "filter_b2_im": db2_im,
            "head_weight": dhead_w,
            "head_bias": dhead_b,
            "input_mix": _mix_backward(inputs, dz),
        })


# ---------------------------------------------------------------------------
# frets
# ---------------------------------------------------------------------------

class FretsModel(ForecastModel):
    """Separate tanh MLPs on the real and imaginary spectrum parts."""

    kind = "frets"

    @classmethod
    def default_hyper(cls, lookback, horizon, n_features):
        return {"hidden": lookback}

    @classmethod
    def layout(cls, lookback, horizon, n_features, hyper):
        m, L = hyper["hidden"], lookback
        return layout_from_lengths([
            ("re_w1", m * L),
            ("re_b1", m),
            ("re_w2", L * m),
            ("re_b2", L),
            ("im_w1", m * L),
            ("im_b1", m),
            ("im_w2", L * m),
            ("im_b2", L),
            ("head_weight", horizon * L),
            ("head_bias", horizon),
            ("input_mix", n_features),
        ])

    @classmethod
    def init_values(cls, lookback, horizon, n_features, hyper, rng):
        m, L, H = hyper["hidden"], lookback, horizon
        parts = []
        for _ in range(2):  # re net then im net
            b1 = _affine_bound(L)
            parts.append(rng.uniform(-b1, b1, size=m * L))
            parts.append(rng.uniform(-b1, b1, size=m))
            b2 = _affine_bound(m)
            parts.append(rng.uniform(-b2, b2, size=L * m))
            parts.append(rng.uniform(-b2, b2, size=L))
        hb = _affine_bound(L)
        parts.append(rng.uniform(-hb, hb, size=H * L))
        parts.append(rng.uniform(-hb, hb, size=H))
        mb = _affine_bound(n_features)
        parts.append(rng.uniform(-mb, mb, size=n_features))
        return np.concatenate(parts)

    def _bind_views(self):
        m, L, H = self.hyper["hidden"], self.lookback, self.horizon
        v = self._views
        self.re_w1 = v["re_w1"].reshape(m, L)
        self.re_b1 = v["re_b1"]
        self.re_w2 = v["re_w2"].reshape(L, m)
        self.re_b2 = v["re_b2"]
        self.im_w1 = v["im_w1"].reshape(m, L)
        self.im_b1 = v["im_b1"]
        self.im_w2 = v["im_w2"].reshape(L, m)
        self.im_b2 = v["im_b2"]
        self.head_w = v["head_weight"].reshape(H, L)
        self.head_b = v["head_bias"]
        self.input_mix = v["input_mix"]

    def _forward(self, inputs):
        z = _mix_forward(inputs, self.input_mix)
        s_re, s_im = numerics.dft_batch(z)
        h_re = np.tanh(s_re @ self.re_w1.T + self.re_b1)
        x_re = h_re @ self.re_w2.T + self.re_b2
        h_im = np.tanh(s_im @ self.im_w1.T + self.im_b1)
        x_im = h_im @ self.im_w2.T + self.im_b2
        recon = numerics.real_idft_batch(x_re, x_im)
        pred = _head_forward(recon, self.head_w, self.head_b)
        return pred, (s_re, s_im, h_re, h_im, recon)

    def predict_batch(self, inputs):
        return self._forward(np.asarray(inputs, dtype=np.float64))[0]

    def _backward(self, inputs, dpred, cache):
        s_re, s_im, h_re, h_im, recon = cache
        dhead_w, dhead_b, drecon = _head_backward(recon, dpred, self.head_w)
        dx_re, dx_im = numerics.real_idft_batch_adjoint(drecon)

        dre_w2 = dx_re.T @ h_re
        dre_b2 = dx_re.sum(axis=0)
        dh_re = dx_re @ self.re_w2
        du_re = dh_re * (1.0 - h_re * h_re)
        dre_w1 = du_re.T @ s_re
        dre_b1 = du_re.sum(axis=0)
        ds_re = du_re @ self.re_w1

        dim_w2 = dx_im.T @ h_im
        dim_b2 = dx_im.sum(axis=0)
        dh_im = dx_im @ self.im_w2
        du_im = dh_im * (1.0 - h_im * h_im)
        dim_w1 = du_im.T @ s_im
        dim_b1 = du_im.sum(axis=0)
        ds_im = du_im @ self.im_w1

        dz = numerics.dft_batch_adjoint(ds_re, ds_im)
        return self._grad_vector({
            "re_w1": dre_w1, "re_b1": dre_b1, "re_w2": dre_w2, "re_b2": dre_b2,
            "im_w1": dim_w1, "im_b1": dim_b1, "im_w2": dim_w2, "im_b2": dim_b2,
            "head_weight": dhead_w,
            "head_bias": dhead_b,
            "input_mix": _mix_backward(inputs, dz),
        })


# ---------------------------------------------------------------------------
# construction and checkpoints
# ---------------------------------------------------------------------------

_CLASSES = {
    cls.kind: cls
    for cls in (DLinearModel, PaiFilterModel, TexFilterModel, FretsModel)
}


def _resolve_hyper(cls, lookback, horizon, n_features, hyper):
    resolved = cls.default_hyper(lookback, horizon, n_features)
    for key, value in (hyper or {}).items():
        if key not in resolved:
            raise ContractViolation(f"{cls.kind}: unknown hyperparameter {key!r}")
        resolved[key] = value
    if cls is DLinearModel:
        if resolved["harmonics"] < 1:
            raise ContractViolation("dlinear: harmonics must be >= 1")
        if not resolved["period"] > 0:
            raise ContractViolation("dlinear: period must be > 0")
        resolved["harmonics"] = int(resolved["harmonics"])
        resolved["period"] = float(resolved["period"])
        resolved["use_anchor"] = bool(resolved["use_anchor"])
    elif "hidden" in resolved:
        if resolved["hidden"] < 1:
            raise ContractViolation(f"{cls.kind}: hidden width must be >= 1")
        resolved["hidden"] = int(resolved["hidden"])
    return resolved


def build_model(kind: str, lookback: int, horizon: int, n_features: int,
                hyper: dict | None = None, seed: int = 0) -> ForecastModel:
    """Construct a seeded model; layout depends only on the arguments."""
    if kind not in _CLASSES:
        raise ContractViolation(
            f"unknown model kind {kind!r}; supported: {', '.join(MODEL_KINDS)}"
        )
    if lookback < 4:
        raise ContractViolation("lookback must be >= 4")
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    if n_features not in (2, 3):
        raise ContractViolation("feature count must be 2 or 3")
    cls = _CLASSES[kind]
    resolved = _resolve_hyper(cls, lookback, horizon, n_features, hyper)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _kind_tag(kind))))
    values = cls.init_values(lookback, horizon, n_features, resolved, rng)
    return cls(lookback, horizon, n_features, resolved, values)


def _kind_tag(kind: str) -> int:
    return MODEL_KINDS.index(kind)


def predict(model: ForecastModel, window) -> np.ndarray:
    return model.predict(window)


def loss(model: ForecastModel, inputs, targets) -> float:
    return model.loss(inputs, targets)


def export_params(model: ForecastModel) -> ParamVector:
    return model.export_params()


def import_params(model: ForecastModel, pvec: ParamVector) -> ForecastModel:
    return model.import_params(pvec)


_CKPT_MAGIC = b"FMCK"
_CKPT_VERSION = 1


def save_checkpoint(model: ForecastModel, path) -> None:
    """Checkpoint = JSON header (kind, shapes, hyper) + parameter blob."""
    header = json.dumps(
        {
            "format_version": _CKPT_VERSION,
            "kind": model.kind,
            "lookback": model.lookback,
            "horizon": model.horizon,
            "n_features": model.n_features,
            "hyper": model.hyper,
        },
        sort_keys=True,
    ).encode("utf-8")
    blob = numerics.param_vector_to_bytes(model.export_params())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_checkpoint(path) -> ForecastModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ContractViolation(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    if header["format_version"] != _CKPT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {header['format_version']}")
    pvec = numerics.param_vector_from_bytes(blob[8 + hlen :])
    cls = _CLASSES[header["kind"]]
    return cls(
        header["lookback"], header["horizon"], header["n_features"],
        header["hyper"], pvec.values,
    )
