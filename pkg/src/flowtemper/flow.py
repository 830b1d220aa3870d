"""Temperature-conditional normalizing flow.

A stack of rational-quadratic spline coupling layers. Each layer permutes the
coordinates (fixed, seeded), passes half of them through unchanged, and
transforms the rest with monotone splines whose knots come from a dense
conditioner network fed the pass-through coordinates plus ln(T).

Every kernel here runs on plain numpy arrays or on diffgraph Nodes through the
same code path, so sampling/evaluation is tape-free while training gets exact
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .diffgraph import ParamVector, make_layout
from .mathcore import RngStream

MIN_BIN = 1e-3
EPS_DERIV = 1e-3


def _exact_unit_shift(eps: float) -> float:
    # Raw-zero derivatives must decode to exactly 1.0 so a zero-initialized
    # conditioner yields a bitwise-identity flow. Nudge the softplus shift by
    # ulps until the kernel's own double-precision expression lands on 1.0.
    c = math.log(math.expm1(1.0 - eps))
    for _ in range(64):
        val = float(eps + dg.softplus(np.float64(0.0) + c))
        if val == 1.0:
            return c
        c = math.nextafter(c, math.inf if val < 1.0 else -math.inf)
    raise RuntimeError("could not calibrate derivative shift")


_DERIV_SHIFT = _exact_unit_shift(EPS_DERIV)


@dataclass(frozen=True)
class SplineKnots:
    """Decoded monotone-spline parameters on [-B, B]."""

    widths: np.ndarray
    heights: np.ndarray
    derivatives: np.ndarray  # internal knots only; boundary derivatives are 1
    interval_halfwidth: float
    bin_count: int

    def __post_init__(self):
        B, K = self.interval_halfwidth, self.bin_count
        w, h, d = (np.asarray(a, dtype=float) for a in (self.widths, self.heights, self.derivatives))
        if w.shape != (K,) or h.shape != (K,) or d.shape != (K - 1,):
            raise ValueError("invalid knots: wrong parameter shapes")
        if B <= 0 or K < 1:
            raise ValueError("invalid knots: need B > 0 and K >= 1")
        if np.any(w < MIN_BIN) or np.any(h < MIN_BIN):
            raise ValueError(f"invalid knots: bins must be >= {MIN_BIN}")
        if abs(w.sum() - 2 * B) > 1e-8 or abs(h.sum() - 2 * B) > 1e-8:
            raise ValueError("invalid knots: widths/heights must sum to 2B")
        if np.any(d <= 0):
            raise ValueError("invalid knots: derivatives must be positive")

    @classmethod
    def identity(cls, bin_count: int, interval_halfwidth: float) -> "SplineKnots":
        K, B = bin_count, interval_halfwidth
        return cls(
            widths=np.full(K, 2 * B / K),
            heights=np.full(K, 2 * B / K),
            derivatives=np.ones(K - 1),
            interval_halfwidth=B,
            bin_count=K,
        )


def decode_raw_params(raw, B: float, K: int) -> SplineKnots:
    """Map a raw (3K-1)-vector to valid knots; the all-zero vector decodes
    to exact identity knots."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (3 * K - 1,):
        raise ValueError(f"raw spline params must have length {3 * K - 1}, got {raw.shape}")
    w, h, d = _decode(raw.reshape(1, 1, -1), B, K)
    return SplineKnots(
        widths=w[0, 0],
        heights=h[0, 0],
        derivatives=d[0, 0, 1:-1],
        interval_halfwidth=B,
        bin_count=K,
    )


def _decode(raw3, B: float, K: int):
    """Raw (n, m, 3K-1) -> (widths, heights, derivs_full) with derivs_full of
    size K+1 including boundary ones; tape-aware."""
    w_raw = raw3[..., :K] if not dg.is_node(raw3) else dg.getitem(raw3, (Ellipsis, slice(0, K)))
    h_raw = raw3[..., K : 2 * K] if not dg.is_node(raw3) else dg.getitem(raw3, (Ellipsis, slice(K, 2 * K)))
    d_raw = raw3[..., 2 * K :] if not dg.is_node(raw3) else dg.getitem(raw3, (Ellipsis, slice(2 * K, 3 * K - 1)))
    widths = MIN_BIN + (2 * B - K * MIN_BIN) * dg.softmax(w_raw, axis=-1)
    heights = MIN_BIN + (2 * B - K * MIN_BIN) * dg.softmax(h_raw, axis=-1)
    derivs = EPS_DERIV + dg.softplus(d_raw + _DERIV_SHIFT)
    shape = dg.raw(derivs).shape[:-1] + (1,)
    ones = np.ones(shape)
    derivs_full = dg.concat_last([ones, derivs, ones])
    return widths, heights, derivs_full


def _bin_index(x_v: np.ndarray, edges_v: np.ndarray) -> np.ndarray:
    # x in [e_k, e_{k+1}) -> k, right endpoint folded into the last bin
    idx = np.sum(x_v[..., None] >= edges_v[..., 1:-1], axis=-1)
    return idx.astype(np.intp)


def _spline_core(x, widths, heights, derivs_full, B: float, inverse: bool = False):
    """Monotone rational-quadratic map on [-B, B], identity outside.

    Inputs have shape (n, m); per-position parameters (n, m, K) / (n, m, K+1).
    Returns (output, dlogdet), each (n, m). Written so that identity knots
    (equal bins, unit derivatives) reproduce the input bitwise with dlogdet 0.
    """
    x_v = dg.raw(x)
    if not np.all(np.isfinite(x_v)):
        raise ValueError("non-finite input to spline transform")
    inside = np.abs(x_v) <= B
    xc = dg.where(inside, x, 0.0)

    zero_col = np.zeros(dg.raw(widths).shape[:-1] + (1,))
    x_edges = dg.concat_last([zero_col, dg.cumsum_last(widths)]) - B
    y_edges = dg.concat_last([zero_col, dg.cumsum_last(heights)]) - B
    search_edges = dg.raw(y_edges) if inverse else dg.raw(x_edges)
    bin_idx = _bin_index(np.where(inside, x_v, 0.0), search_edges)

    w = dg.gather_last(widths, bin_idx)
    h = dg.gather_last(heights, bin_idx)
    xk = dg.gather_last(x_edges, bin_idx)
    yk = dg.gather_last(y_edges, bin_idx)
    dk = dg.gather_last(derivs_full, bin_idx)
    dk1 = dg.gather_last(derivs_full, bin_idx + 1)
    s = h / w
    delta = dk + dk1 - 2.0 * s

    if not inverse:
        xi = (xc - xk) / w
    else:
        dy = xc - yk
        a = h * (s - dk) + dy * delta
        b = h * dk - dy * delta
        c = -s * dy
        disc = b * b - 4.0 * a * c
        disc = dg.where(dg.raw(disc) < 0.0, 0.0, disc)
        xi = (2.0 * c) / (-b - dg.sqrt(disc))
        # One in-bin Newton step tightens the analytic root to ~1 ulp. Large
        # steps mean a near-degenerate bin where polishing cannot help, so
        # they are suppressed rather than risking an overshoot out of the bin.
        xi1m0 = 1.0 - xi
        den0 = s + delta * (xi * xi1m0)
        beta0 = s * xi + dk * xi1m0
        dnum0 = (s * s) * (xi * (dk1 * xi + s * xi1m0) + xi1m0 * beta0)
        y_err = (yk - xc) + h * xi * beta0 / den0
        step = y_err * (den0 * den0) / (w * dnum0)
        polished = xi - step
        pol_v = dg.raw(polished)
        ok = (np.abs(dg.raw(step)) < 1e-3) & (pol_v >= 0.0) & (pol_v <= 1.0)
        xi = dg.where(ok, polished, xi)

    xi1m = 1.0 - xi
    q = xi * xi1m
    den = s + delta * q
    beta = s * xi + dk * xi1m
    # Grouped so identity knots give exactly 1 (and hence log 0 / zero shift).
    dnum = (s * s) * (xi * (dk1 * xi + s * xi1m) + xi1m * beta)
    dlogdet = dg.log(dnum) - 2.0 * dg.log(den)

    if not inverse:
        out_in = xc + ((yk - xk) + (xc - xk) * (s * beta / den - 1.0))
        dld_in = dlogdet
    else:
        out_in = xc + ((xk - yk) + (xi * w - (xc - yk)))
        dld_in = -dlogdet

    out = dg.where(inside, out_in, x)
    dld = dg.where(inside, dld_in, 0.0)
    return out, dld


def _knots_to_batch(knots: SplineKnots):
    w = knots.widths.reshape(1, 1, -1)
    h = knots.heights.reshape(1, 1, -1)
    d = np.concatenate([[1.0], knots.derivatives, [1.0]]).reshape(1, 1, -1)
    return w, h, d


def rq_spline_forward(x: float, knots: SplineKnots):
    """Scalar monotone spline map; returns (y, dlogdet)."""
    w, h, d = _knots_to_batch(knots)
    y, dld = _spline_core(np.array([[float(x)]]), w, h, d, knots.interval_halfwidth)
    return float(y[0, 0]), float(dld[0, 0])


def rq_spline_inverse(y: float, knots: SplineKnots):
    """Scalar inverse of `rq_spline_forward`; returns (x, dlogdet)."""
    w, h, d = _knots_to_batch(knots)
    x, dld = _spline_core(np.array([[float(y)]]), w, h, d, knots.interval_halfwidth, inverse=True)
    return float(x[0, 0]), float(dld[0, 0])


class _Layer:
    """Static structure of one coupling layer (indices only, no parameters)."""

    def __init__(self, perm, pass_idx, trans_idx):
        self.perm = np.asarray(perm, dtype=np.intp)
        self.pass_idx = np.asarray(pass_idx, dtype=np.intp)
        self.trans_idx = np.asarray(trans_idx, dtype=np.intp)
        self.restore = np.argsort(np.concatenate([self.pass_idx, self.trans_idx])).astype(np.intp)
        self.inv_perm = np.argsort(self.perm).astype(np.intp)


class FlowModel:
    """Composition of temperature-conditional spline coupling layers.

    Parameters live in one flat ParamVector; evaluation takes either the
    stored numpy values or a diffgraph leaf Node (for gradients).
    """

    def __init__(self, dim, n_layers, hidden, knots, interval_halfwidth, perms, params=None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self.n_layers = int(n_layers)
        self.hidden = tuple(int(h) for h in hidden)
        self.K = int(knots)
        self.B = float(interval_halfwidth)
        if len(perms) != n_layers:
            raise ValueError("need one permutation per layer")

        self.layers = []
        n_pass = (dim + 1) // 2
        for l, perm in enumerate(perms):
            perm = np.asarray(perm, dtype=np.intp)
            if sorted(perm.tolist()) != list(range(dim)):
                raise ValueError(f"layer {l}: not a permutation of 0..{dim - 1}")
            if dim == 1:
                pass_idx, trans_idx = np.array([], dtype=np.intp), np.array([0], dtype=np.intp)
            elif l % 2 == 0:
                pass_idx, trans_idx = np.arange(n_pass), np.arange(n_pass, dim)
            else:
                pass_idx, trans_idx = np.arange(n_pass, dim), np.arange(n_pass)
            self.layers.append(_Layer(perm, pass_idx, trans_idx))

        composed = np.arange(dim, dtype=np.intp)
        for layer in self.layers:
            composed = composed[layer.perm]
        self.unscramble = np.argsort(composed).astype(np.intp)

        spec = []
        for l, layer in enumerate(self.layers):
            c_in = len(layer.pass_idx) + 1  # pass-through coords + ln(T) feature
            m_out = len(layer.trans_idx) * (3 * self.K - 1)
            sizes = (c_in,) + self.hidden + (m_out,)
            for j in range(len(sizes) - 1):
                spec.append((f"L{l}.W{j}", (sizes[j], sizes[j + 1])))
                spec.append((f"L{l}.b{j}", (sizes[j + 1],)))
        layout, total = make_layout(spec)
        if params is None:
            params = ParamVector(np.zeros(total), layout)
        else:
            params = ParamVector(np.asarray(params, dtype=float), layout)
        self.params = params
        self._n_weight_mats = len(self.hidden) + 1

    # -- construction helpers ------------------------------------------

    def init_params(self, rng: RngStream) -> None:
        """He-style init for hidden layers, exact zeros for each final layer
        (identity flow at initialization)."""
        for l, layer in enumerate(self.layers):
            c_in = len(layer.pass_idx) + 1
            sizes = (c_in,) + self.hidden
            for j in range(len(self.hidden)):
                W = self.params.view(f"L{l}.W{j}")
                W[...] = rng.child("init", l, j).generator().standard_normal(W.shape) * math.sqrt(
                    2.0 / sizes[j]
                )
                self.params.view(f"L{l}.b{j}")[...] = 0.0
            jf = self._n_weight_mats - 1
            self.params.view(f"L{l}.W{jf}")[...] = 0.0
            self.params.view(f"L{l}.b{jf}")[...] = 0.0

    def randomize(self, rng: RngStream, scale: float = 0.1) -> None:
        """Perturb all parameters (tests need non-identity flows)."""
        g = rng.generator()
        self.params.values += scale * g.standard_normal(self.params.values.shape)

    def architecture(self) -> dict:
        return {
            "dim": self.dim,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden),
            "knots": self.K,
            "interval_halfwidth": self.B,
            "perms": [layer.perm.tolist() for layer in self.layers],
            "context": "log_temperature",
        }

    @classmethod
    def from_architecture(cls, arch: dict, params=None) -> "FlowModel":
        return cls(
            dim=arch["dim"],
            n_layers=arch["n_layers"],
            hidden=arch["hidden"],
            knots=arch["knots"],
            interval_halfwidth=arch["interval_halfwidth"],
            perms=[np.asarray(p, dtype=np.intp) for p in arch["perms"]],
            params=params,
        )

    # -- evaluation ------------------------------------------------------

    def _lnT_col(self, T, n: int) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        if np.any(T <= 0):
            raise ValueError("temperature must be positive")
        if T.ndim == 0:
            return np.full((n, 1), math.log(float(T)))
        if T.shape != (n,):
            raise ValueError(f"temperature must be scalar or length-{n} vector")
        return np.log(T)[:, None]

    def _conditioner(self, l: int, cin, p):
        h = cin
        for j in range(self._n_weight_mats):
            W = self.params.tensor(p, f"L{l}.W{j}")
            b = self.params.tensor(p, f"L{l}.b{j}")
            h = dg.matmul(h, W) + b
            if j < self._n_weight_mats - 1:
                h = dg.silu(h)
        return h

    def _check_input(self, x, name):
        v = dg.raw(x)
        if np.asarray(v).ndim != 2 or v.shape[1] != self.dim:
            raise ValueError(f"{name} must be an (n, {self.dim}) matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite {name}")

    def forward_batch(self, z, T, p=None):
        """theta = f(z; T) with accumulated log|det df/dz|; (n,d) -> ((n,d),(n,))."""
        self._check_input(z, "z")
        n = dg.raw(z).shape[0]
        lnT = self._lnT_col(T, n)
        if p is None:
            p = self.params.values
        x = z
        logdet = np.zeros(n)
        for l, layer in enumerate(self.layers):
            x = dg.take_cols(x, layer.perm)
            xt = dg.take_cols(x, layer.trans_idx)
            if len(layer.pass_idx):
                xp = dg.take_cols(x, layer.pass_idx)
                cin = dg.concat_cols([xp, lnT])
            else:
                xp = None
                cin = lnT
            raw = self._conditioner(l, cin, p)
            raw3 = dg.reshape(raw, (n, len(layer.trans_idx), 3 * self.K - 1))
            widths, heights, derivs = _decode(raw3, self.B, self.K)
            yt, dld = _spline_core(xt, widths, heights, derivs, self.B)
            x = dg.take_cols(dg.concat_cols([xp, yt]) if xp is not None else yt, layer.restore)
            logdet = logdet + dg.sum_(dld, axis=1)
        x = dg.take_cols(x, self.unscramble)
        return x, logdet

    def inverse_batch(self, theta, T, p=None):
        """z = f^{-1}(theta; T) with the inverse map's log-determinant."""
        self._check_input(theta, "theta")
        n = dg.raw(theta).shape[0]
        lnT = self._lnT_col(T, n)
        if p is None:
            p = self.params.values
        x = dg.take_cols(theta, np.argsort(self.unscramble).astype(np.intp))
        logdet = np.zeros(n)
        for l in range(self.n_layers - 1, -1, -1):
            layer = self.layers[l]
            yt = dg.take_cols(x, layer.trans_idx)
            if len(layer.pass_idx):
                xp = dg.take_cols(x, layer.pass_idx)
                cin = dg.concat_cols([xp, lnT])
            else:
                xp = None
                cin = lnT
            raw = self._conditioner(l, cin, p)
            raw3 = dg.reshape(raw, (n, len(layer.trans_idx), 3 * self.K - 1))
            widths, heights, derivs = _decode(raw3, self.B, self.K)
            xt, dld = _spline_core(yt, widths, heights, derivs, self.B, inverse=True)
            x = dg.take_cols(dg.concat_cols([xp, xt]) if xp is not None else xt, layer.restore)
            x = dg.take_cols(x, layer.inv_perm)
            logdet = logdet + dg.sum_(dld, axis=1)
        return x, logdet

    def log_prob_batch(self, theta, T, p=None):
        """Exact normalized log density of the sampling distribution at T."""
        z, logdet_inv = self.inverse_batch(theta, T, p)
        T = np.asarray(T, dtype=float)
        base = -0.5 * self.dim * np.log(2.0 * np.pi * T) - dg.sum_(z * z, axis=1) / (2.0 * T)
        return base + logdet_inv

    def sample(self, rng: RngStream, n: int, T):
        """Draw n samples at temperature T; log densities reuse the forward
        log-determinant (no inverse pass)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        T_arr = np.asarray(T, dtype=float)
        eps = rng.generator().standard_normal((n, self.dim))
        z = eps * np.sqrt(T_arr if T_arr.ndim == 0 else T_arr[:, None])
        theta, logdet = self.forward_batch(z, T)
        base = -0.5 * self.dim * np.log(2.0 * np.pi * T_arr) - np.sum(z * z, axis=1) / (2.0 * T_arr)
        return theta, base - logdet


def build_flow(
    dim: int,
    n_layers: int = 6,
    hidden=(128, 128),
    knots: int = 16,
    interval_halfwidth: float = 8.0,
    rng: RngStream | None = None,
) -> FlowModel:
    """Construct a flow with seeded permutations and identity initialization."""
    rng = rng or RngStream(0)
    perms = []
    for l in range(n_layers):
        if dim == 1:
            perms.append(np.array([0], dtype=np.intp))
        else:
            perms.append(rng.child("perm", l).generator().permutation(dim).astype(np.intp))
    model = FlowModel(dim, n_layers, hidden, knots, interval_halfwidth, perms)
    model.init_params(rng)
    return model


# -- spec-level functional wrappers ----------------------------------------


def flow_forward(model: FlowModel, z, T):
    """Single-vector forward map: returns (theta, logdet)."""
    theta, logdet = model.forward_batch(np.asarray(z, dtype=float)[None, :], T)
    return theta[0], float(logdet[0])


def flow_inverse(model: FlowModel, theta, T):
    """Single-vector inverse map: returns (z, logdet of the inverse)."""
    z, logdet = model.inverse_batch(np.asarray(theta, dtype=float)[None, :], T)
    return z[0], float(logdet[0])


def log_prob(model: FlowModel, theta, T) -> float:
    return float(model.log_prob_batch(np.asarray(theta, dtype=float)[None, :], T)[0])


def sample(model: FlowModel, rng: RngStream, n: int, T):
    return model.sample(rng, n, T)
